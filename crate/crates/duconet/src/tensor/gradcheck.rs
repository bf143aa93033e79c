//! Central-difference gradient verification.

use super::Tensor;

/// Numerically differentiates `f` at `params` with central differences.
///
/// Returns one tensor of partials per parameter, in order. `f` must be a pure
/// function of the parameter values; it is re-evaluated 2 * numel times per
/// parameter, so keep the inputs small.
pub fn finite_difference_gradient<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for i in 0..params[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = f(&work);
            work[pi].data_mut()[i] = orig - h;
            let down = f(&work);
            work[pi].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative disagreement, |analytic - numeric| / max(1, |analytic|).
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
