use crate::error::{Error, Result};

use super::ParamTensor;

/// One SGD step with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// v ← momentum·v + grad + weight_decay·value
/// value ← value − lr·v
/// ```
///
/// Gradients are zeroed afterwards. Every gradient is checked for
/// finiteness before any parameter is touched.
pub fn sgd_step(params: &mut [&mut ParamTensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad().is_finite()) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.grad();
        let value = p.value.clone();
        let v = p.momentum_mut();
        for ((vi, gi), wi) in v.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(value.as_slice()) {
            *vi = momentum * *vi + gi + weight_decay * wi;
        }
        let v = v.clone();
        if lr != 0.0 {
            for (wi, vi) in p.value.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *wi -= lr * vi;
            }
        }
        p.zero_grad();
    }
    Ok(())
}
