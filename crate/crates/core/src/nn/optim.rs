use serde::{Deserialize, Serialize};

use super::{Grads, Mat, ParamId, ParamSet};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    /// Applies one update to every parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step_filtered(params, grads, |_| true);
    }

    pub fn step_filtered(&mut self, params: &mut ParamSet, grads: &Grads, trainable: impl Fn(ParamId) -> bool) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !trainable(id) {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let w = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Halves the learning rate when validation accuracy has not improved for
/// `window` consecutive epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateauHalving {
    pub lr: f64,
    pub window: usize,
    best: f64,
    stale_epochs: usize,
}

impl PlateauHalving {
    pub fn new(lr: f64, window: usize) -> Self {
        Self { lr, window, best: f64::NEG_INFINITY, stale_epochs: 0 }
    }

    /// Records that one epoch has elapsed; returns the learning rate to use next.
    pub fn end_epoch(&mut self) -> f64 {
        self.stale_epochs += 1;
        if self.stale_epochs >= self.window {
            self.lr *= 0.5;
            self.stale_epochs = 0;
        }
        self.lr
    }

    /// Feeds a validation score; improvements reset the plateau counter.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.stale_epochs = 0;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_halves_after_window_without_improvement() {
        let mut s = PlateauHalving::new(0.001, 50);
        s.observe(0.5);
        for _ in 0..49 {
            assert_eq!(s.end_epoch(), 0.001);
        }
        assert_eq!(s.end_epoch(), 0.0005);
        for _ in 0..49 {
            s.end_epoch();
        }
        assert_eq!(s.end_epoch(), 0.00025);
    }

    #[test]
    fn improvement_resets_the_window() {
        let mut s = PlateauHalving::new(1.0, 3);
        s.end_epoch();
        s.end_epoch();
        assert!(s.observe(0.9));
        s.end_epoch();
        s.end_epoch();
        assert_eq!(s.lr, 1.0);
        assert_eq!(s.end_epoch(), 0.5);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Mat::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let mut g = Grads::zeros_like(&ps);
            *g.get_mut(id) = ps.get(id).map(|x| 2.0 * x);
            opt.step(&mut ps, &g);
        }
        assert!(ps.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }
}
