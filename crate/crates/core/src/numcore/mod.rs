//! Dense double-precision kernels and the hand-differentiated layer set
//! used by the detector: affine maps, relu, the two softmax normalizations,
//! SGD with momentum, and a central-difference gradient checker.

mod gradcheck;
mod layers;
mod matrix;
mod sgd;

pub use gradcheck::{grad_check, Differentiable, GradCheckReport};
pub use layers::{relu_backward, relu_forward, Linear, ParamTensor};
pub use matrix::{
    softmax_backward_over_classes, softmax_backward_over_proposals, softmax_over_classes, softmax_over_proposals,
    Matrix,
};
pub use sgd::sgd_step;

/// Lower clamp applied to every argument of `ln` inside a loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(x, LOG_FLOOR))`; NaN stays NaN.
pub fn clamped_ln(x: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.max(LOG_FLOOR).ln()
    }
}
