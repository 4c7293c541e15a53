//! Model assembly, the training loop, inference and checkpoints.
//!
//! One optimizer step averages the combined per-image loss over a batch:
//! the instance-classifier loss plus every refinement agent's loss plus the
//! distillation loss, with the supervision-mining thresholds read from the
//! aggregation schedule at the current step.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{Checkpoint, ParamBlock, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use model::{total_loss, FrozenSupervisionLoss, LossTerms, Model, ModelOutput, Supervision};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::distill::average_agent_scores;
use crate::error::{Error, Result};
use crate::geometry::{nms, Detection};
use crate::numcore::{sgd_step, Matrix};

/// Per-step record of the training loop. Loss terms are batch means.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lambda: f64,
    pub lambda_ign: f64,
    pub lr: f64,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub num_agents: usize,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `step,lambda,lambda_ign,lr,L_class,L_agent_1..K,L_distill,L_total`.
    /// `L_distill` is 0 when distillation is off.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lambda,lambda_ign,lr,L_class");
        for k in 1..=self.num_agents {
            out.push_str(&format!(",L_agent_{k}"));
        }
        out.push_str(",L_distill,L_total\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}", r.step, r.lambda, r.lambda_ign, r.lr, r.terms.class));
            for a in &r.terms.agents {
                out.push_str(&format!(",{a}"));
            }
            out.push_str(&format!(",{},{}\n", r.terms.distill.unwrap_or(0.0), r.terms.total()));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Endless seeded stream of dataset indices, reshuffled every epoch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Runs `config.total_steps` SGD steps over `dataset`.
///
/// Deterministic given `config.seed`: it seeds both the initialization and
/// the batch order. Ground truth, if present, is never read.
pub fn train(dataset: &[ImageSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    for s in dataset {
        if s.num_classes() != config.num_classes || s.features.cols() != config.raw_dim {
            return Err(Error::InvalidConfig(format!(
                "image {} has {} classes and {}-dim features, config expects {} and {}",
                s.image_id,
                s.num_classes(),
                s.features.cols(),
                config.num_classes,
                config.raw_dim
            )));
        }
        if !s.has_positive_label() {
            return Err(Error::NoPositiveLabel);
        }
    }

    let mut model = Model::from_config(config, &mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut log = TrainLog { num_agents: config.num_agents, rows: Vec::with_capacity(config.total_steps) };
    if config.total_steps == 0 {
        return Ok(TrainOutcome { checkpoint: Checkpoint::capture(&model, config, 0), log });
    }

    let schedule = config.schedule()?;
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    let scale = 1.0 / config.batch_size as f64;
    for step in 0..config.total_steps {
        let lambda = schedule.lambda_at(step)?;
        let lambda_ign = schedule.lambda_ign_at(step)?;
        let lr = config.lr_at(step);
        model.zero_grad();
        let mut batch_terms: Option<LossTerms> = None;
        for idx in sampler.next_batch(config.batch_size) {
            let view = dataset[idx].training_view();
            let out = model.forward(view.features)?;
            let sup =
                Model::mine_supervision(&out, view.proposals, view.labels, lambda, lambda_ign, config.ignore_enabled)?;
            let terms = Model::loss_terms(&out, view.labels, &sup)?;
            model::check_finite(&terms, step)?;
            model.backward(view.labels, &out, &sup, scale)?;
            batch_terms.get_or_insert_with(|| LossTerms::zeros_like(&terms)).accumulate(&terms, scale);
        }
        sgd_step(&mut model.params_mut(), lr, config.momentum, config.weight_decay)?;
        log.rows.push(LogRow { step, lambda, lambda_ign, lr, terms: batch_terms.expect("batch is non-empty") });
    }
    Ok(TrainOutcome { checkpoint: Checkpoint::capture(&model, config, config.total_steps), log })
}

/// Which heads are averaged at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    AgentsOnly,
    #[default]
    AgentsPlusDistill,
}

impl std::str::FromStr for HeadSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "agents" | "agents_only" | "agents-only" => Ok(HeadSelection::AgentsOnly),
            "agents+distill" | "agents_plus_distill" | "agents-plus-distill" | "all" => {
                Ok(HeadSelection::AgentsPlusDistill)
            }
            _ => Err(format!("unknown head selection `{s}` (expected `agents` or `agents+distill`)")),
        }
    }
}

impl std::fmt::Display for HeadSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadSelection::AgentsOnly => "agents",
            HeadSelection::AgentsPlusDistill => "agents+distill",
        })
    }
}

/// Mean of the selected heads' tables, background row dropped (`C×|R|`).
/// A model with no selected head falls back to the instance-classifier
/// scores.
pub fn proposal_scores(out: &ModelOutput, heads: HeadSelection) -> Result<Matrix> {
    let mut tables: Vec<Matrix> = out.agents.clone();
    if heads == HeadSelection::AgentsPlusDistill {
        tables.extend(out.distill.clone());
    }
    if tables.is_empty() {
        return Ok(out.midn.x_r.clone());
    }
    let mean = average_agent_scores(&tables)?;
    Ok(mean.top_rows(mean.rows() - 1))
}

/// Turns a `C×|R|` score table into per-class NMS-filtered detections
/// sorted by descending score (ties keep proposal order).
pub fn detections_from_scores(scores: &Matrix, sample: &ImageSample, nms_threshold: f64) -> Vec<Detection> {
    let mut dets = Vec::with_capacity(scores.rows() * scores.cols());
    for c in 0..scores.rows() {
        for (r, bbox) in sample.proposals.iter().enumerate() {
            dets.push(Detection { bbox: *bbox, class_id: c + 1, score: scores[(c, r)] });
        }
    }
    let mut kept: Vec<Detection> = nms(&dets, nms_threshold).into_iter().map(|i| dets[i]).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept
}

pub fn infer(sample: &ImageSample, model: &Model, heads: HeadSelection, nms_threshold: f64) -> Result<Vec<Detection>> {
    let out = model.apply(&sample.features)?;
    Ok(detections_from_scores(&proposal_scores(&out, heads)?, sample, nms_threshold))
}

/// [`infer`] over many images in parallel; output order follows input.
pub fn infer_all(
    samples: &[ImageSample],
    model: &Model,
    heads: HeadSelection,
    nms_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    samples.par_iter().map(|s| infer(s, model, heads, nms_threshold)).collect()
}
