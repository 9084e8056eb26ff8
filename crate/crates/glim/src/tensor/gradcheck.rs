//! Central finite-difference gradient checking.
//!
//! The checker only calls the loss function forward, so it is independent of
//! the backward pass it is used to verify. Run it at `f64`: the default step
//! of 1e-5 leaves ~1e-10 truncation error on smooth losses.

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerically differentiates `loss` with respect to every entry of every
/// parameter vector, by central differences.
pub fn central_diff_gradients<F>(loss: &mut F, params: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + step;
            let up = loss(&work);
            work[p][i] = orig - step;
            let down = loss(&work);
            work[p][i] = orig;
            g[i] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative disagreement between two gradient vectors. The
/// denominator is floored at 1e-5, so near-zero pairs compare absolutely at
/// the scale of f64 central-difference noise instead of blowing up.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-5);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

/// Convenience: the worst relative error across several parameter gradients.
pub fn max_relative_error_all(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| max_relative_error(a, n))
        .fold(0.0, f64::max)
}
