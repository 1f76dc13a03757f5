//! Finite-difference validation of the reverse-mode contract.

use super::Tensor;
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar-valued function against
/// central differences at every coordinate of `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / (|central| + 1e-8)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f32) -> Result<f32>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let tracked = x.with_grad();
    let y = f(&tracked)?;
    if y.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got output shape {:?}",
            y.shape()
        )));
    }
    if !y.all_finite() {
        return Err(Error::Contract("function value is not finite".into()));
    }
    let grads = y.backward()?;
    let analytic: Vec<f32> = grads
        .wrt(&tracked)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let base = x.to_vec();
    let mut max_rel = 0.0f32;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::new(x.shape(), plus)?)?.item()? as f64;
        let fm = f(&Tensor::new(x.shape(), minus)?)?.item()? as f64;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Contract(
                "function value became non-finite during perturbation".into(),
            ));
        }
        let central = (fp - fm) / (2.0 * step as f64);
        let rel = ((analytic[i] as f64 - central).abs() / (central.abs() + 1e-8)) as f32;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
