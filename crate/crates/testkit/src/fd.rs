//! Central finite differences over flat parameter vectors.

/// Step size for central differences; paired with `f64` this resolves
/// gradients to roughly 1e-10 relative error on smooth functions.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum FdError {
    #[error("loss evaluated to a non-finite value at coordinate {coord}")]
    NonFinite { coord: usize },
}

/// Central-difference gradient of `loss` at `x`, one coordinate at a time.
pub fn fd_grad<F>(mut loss: F, x: &[f64], h: f64) -> Result<Vec<f64>, FdError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(&probe);
        probe[i] = orig - h;
        let down = loss(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(FdError::NonFinite { coord: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error with the guarded denominator `max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}
