use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// ℓ2 norm of all gradients taken together, accumulated in `f64`.
pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / ‖g‖₂` when the global norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::contract(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: format!("gradient norm ({norm})") });
    }
    if norm > max_norm {
        let scale = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    Ok(norm)
}
