use crate::nn::{nearest_sq, Mat};
use crate::{Error, Result};

/// Chamfer distance between two point sets (rows are points):
/// the mean squared distance from each point of `a` to its nearest point in `b`,
/// plus the same from `b` to `a`.
pub fn chamfer_distance(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyCloud);
    }
    if a.cols() != b.cols() {
        return Err(Error::Invalid(format!("point dimension mismatch: {} vs {}", a.cols(), b.cols())));
    }
    let (ab, _) = nearest_sq(a, b);
    let (ba, _) = nearest_sq(b, a);
    Ok(ab.iter().sum::<f64>() / a.rows() as f64 + ba.iter().sum::<f64>() / b.rows() as f64)
}
