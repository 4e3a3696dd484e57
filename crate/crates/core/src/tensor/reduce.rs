//! Whole-tensor reductions. Scalars are accumulated and returned in f64.

use super::Tensor;
use crate::error::{Error, Result};

fn nonempty(x: &Tensor, op: &'static str) -> Result<()> {
    if x.is_empty() {
        Err(Error::Empty { op })
    } else {
        Ok(())
    }
}

/// `Σ|x| / N`
pub fn mean_abs(x: &Tensor) -> Result<f64> {
    nonempty(x, "mean_abs")?;
    Ok(x.data().iter().map(|&v| f64::from(v).abs()).sum::<f64>() / x.len() as f64)
}

/// Gradient of `scale * mean_abs(x)`; the subgradient at 0 is 0.
pub fn mean_abs_backward(x: &Tensor, scale: f64) -> Tensor {
    let k = (scale / x.len() as f64) as f32;
    x.map(|v| {
        if v > 0.0 {
            k
        } else if v < 0.0 {
            -k
        } else {
            0.0
        }
    })
}

/// `Σx² / N`
pub fn mean_sq(x: &Tensor) -> Result<f64> {
    nonempty(x, "mean_sq")?;
    Ok(x.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64)
}

/// Gradient of `scale * mean_sq(x)`.
pub fn mean_sq_backward(x: &Tensor, scale: f64) -> Tensor {
    let k = (2.0 * scale / x.len() as f64) as f32;
    x.scale(k)
}

/// Euclidean norm of the vectorised tensor.
pub fn l2_norm(x: &Tensor) -> Result<f64> {
    nonempty(x, "l2_norm")?;
    Ok(x.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
}

/// Gradient of `scale * ‖x‖₂`, with the norm floored at `eps`.
pub fn l2_norm_backward(x: &Tensor, scale: f64, eps: f64) -> Result<Tensor> {
    let norm = l2_norm(x)?.max(eps);
    let k = (scale / norm) as f32;
    Ok(x.scale(k))
}
