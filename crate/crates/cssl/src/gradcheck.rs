//! Central finite-difference checking of analytic gradients.
//!
//! The function under test is re-evaluated with each parameter coordinate
//! nudged by ±eps. Anything containing a step nonlinearity must be evaluated
//! on a tape in [`crate::StepMode::Smoothed`] mode, so that the analytic
//! backward pass and the differenced forward describe the same function.

use crate::tensor::Tensor;

/// Worst relative error between `analytic` gradients and central finite
/// differences of `f` over every coordinate of every parameter.
///
/// The comparison denominator is max(|analytic|, |fd|) floored at 1e-8, so
/// near-zero gradients are compared absolutely at that scale.
pub fn finite_difference_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], eps: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite_difference_check: eps {eps} outside [1e-7, 1e-3]"
    );
    assert_eq!(
        params.len(),
        analytic.len(),
        "finite_difference_check: {} params vs {} gradient tensors",
        params.len(),
        analytic.len()
    );
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(
            params[pi].shape(),
            grad.shape(),
            "finite_difference_check: param {pi} shape mismatch"
        );
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = f(&work);
            work[pi].data_mut()[ci] = orig - eps;
            let down = f(&work);
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grad.data()[ci];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}
