//! Finite-difference gradient checking.

use super::{Grads, ParamSet};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error denominator floor; components whose analytic and numeric
/// values are both below it are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central finite differences for every scalar
/// of every parameter.
///
/// `loss(params, grads)` must evaluate the loss at `params` and, when `grads` is
/// `Some`, back-propagate into it.
pub fn check_gradients<F>(params: &ParamSet, eps: f64, loss: F) -> GradCheckReport
where
    F: Fn(&ParamSet, Option<&mut Grads>) -> f64,
{
    let mut analytic = Grads::zeros_like(params);
    loss(params, Some(&mut analytic));

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = loss(&probe, None);
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = loss(&probe, None);
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
