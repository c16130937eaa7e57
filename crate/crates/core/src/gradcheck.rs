//! Central finite-difference gradient checking.
//!
//! This is the independent oracle the rest of the crate is validated
//! against: it never touches the reverse-mode machinery, only repeated
//! scalar evaluations of the function under test.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum over coordinates of `|analytic - central| / max(1, |central|)`.
///
/// `f` must be evaluable at `point ± h·e_j` for every coordinate `j`.
pub fn finite_diff_check<F>(mut f: F, point: &Tensor, h: f64, analytic: &[f64]) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), point.numel());
    let mut probe = point.clone();
    let mut max_err = 0.0f64;
    for j in 0..point.numel() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[j] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[j] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                node: j,
                context: "finite-difference evaluation".into(),
            });
        }
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[j] - central).abs() / central.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
