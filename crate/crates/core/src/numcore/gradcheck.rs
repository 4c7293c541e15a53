use crate::error::Result;

use super::ParamTensor;

/// Something with parameters whose loss and analytic gradient can be
/// evaluated repeatedly at perturbed parameter values.
pub trait Differentiable {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    /// Loss at the current parameter values, without touching gradients.
    fn loss(&mut self) -> Result<f64>;

    /// Zeroes gradients, then fills them with `dL/dθ`. Returns the loss.
    fn loss_and_grad(&mut self) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε`, entry by entry, over every parameter.
///
/// Relative error per entry is `|a − n| / max(1e−8, |a| + |n|)`.
pub fn grad_check<M: Differentiable + ?Sized>(model: &mut M, epsilon: f64) -> Result<GradCheckReport> {
    model.loss_and_grad()?;
    let analytic: Vec<(String, Vec<f64>)> =
        model.params_mut().into_iter().map(|p| (p.name.clone(), p.grad().into_vec())).collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, entries_checked: 0 };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let original = model.params_mut()[pi].value.as_slice()[ei];
            model.params_mut()[pi].value.as_mut_slice()[ei] = original + epsilon;
            let plus = model.loss()?;
            model.params_mut()[pi].value.as_mut_slice()[ei] = original - epsilon;
            let minus = model.loss()?;
            model.params_mut()[pi].value.as_mut_slice()[ei] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), ei));
            }
        }
    }
    Ok(report)
}
