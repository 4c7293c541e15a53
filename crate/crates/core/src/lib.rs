//! Weakly-supervised multiple-instance object detection.
//!
//! The pipeline trains a two-stream instance selector from image-level
//! labels only, refines its proposal scores with a cascade of `K`
//! refinement agents, distills the agents' averaged opinion into one more
//! head, and mines per-proposal supervision with an IoU threshold that
//! grows over training while a complementary threshold decides which
//! proposals are ignored.
//!
//! Module map:
//!
//! * [`geometry`] boxes, IoU, per-class NMS
//! * [`numcore`] dense matrices, softmaxes, layers with hand-written
//!   backward passes, SGD, finite-difference gradient checking
//! * [`midn`] feature trunk and the two-stream instance classifier
//! * [`schedule`] the adaptive aggregation thresholds
//! * [`refine`] refinement heads, supervision mining and the weighted loss
//! * [`distill`] the distillation head's supervision source
//! * [`trainer`] the full model, training loop, inference, checkpoints
//! * [`data`] synthetic benchmark generator and dataset files
//! * [`eval`] VOC-style AP/mAP and CorLoc
//! * [`ablation`] the five-arm ablation protocol

pub mod ablation;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod midn;
pub mod numcore;
pub mod refine;
pub mod schedule;
pub mod trainer;

pub use data::{ImageSample, SceneSpec};
pub use error::{Error, Result};
pub use eval::{ApMethod, EvalReport};
pub use geometry::{BBox, Detection};
pub use numcore::{Matrix, ParamTensor};
pub use refine::{AgentScores, MinedLabel, SupervisionTarget};
pub use schedule::{AggregationSchedule, LambdaMode};
pub use trainer::{Checkpoint, HeadSelection, Model, TrainConfig};
