//! Central-difference gradient oracle.

use super::params::ParamVector;
use crate::error::{Error, Result};

/// Gradient of `loss` at `params` by central differences, one coordinate at a
/// time: `(f(p + eps e_k) - f(p - eps e_k)) / (2 eps)`.
pub fn finite_diff_grad<F>(params: &ParamVector, mut loss: F, epsilon: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("finite-difference epsilon must be > 0, got {epsilon}")));
    }
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for k in 0..params.len() {
        let orig = probe.values()[k];
        probe.values_mut()[k] = orig + epsilon;
        let up = loss(&probe)?;
        probe.values_mut()[k] = orig - epsilon;
        let down = loss(&probe)?;
        probe.values_mut()[k] = orig;
        grad.values_mut()[k] = (up - down) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all coordinates. The floor
/// turns the comparison absolute for components near zero, where central
/// differences are dominated by round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}
