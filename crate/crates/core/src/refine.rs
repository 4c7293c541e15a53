//! Refinement agents and online supervision mining.
//!
//! Each agent is one affine layer over the shared proposal features
//! followed by a softmax over `C+1` classes (the last row is background).
//! Agent `k` is supervised by labels mined from the previous score table:
//! for every class present in the image, the top-scoring proposal becomes
//! that class's seed; every other proposal takes the class of the seed it
//! overlaps most, and its IoU with that seed decides between class,
//! background and ignore.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numcore::{
    clamped_ln, softmax_backward_over_classes, softmax_over_classes, Linear, Matrix, ParamTensor, LOG_FLOOR,
};

/// Which head a score table came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentId {
    /// Refinement agent, 1-based.
    Refine(usize),
    Distill,
}

/// `(C+1)×|R|` column-stochastic score table of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentScores {
    pub scores: Matrix,
    pub agent: AgentId,
}

impl AgentScores {
    pub fn num_classes(&self) -> usize {
        self.scores.rows() - 1
    }

    pub fn background_row(&self) -> usize {
        self.scores.rows() - 1
    }
}

/// Mined label of a single proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MinedLabel {
    /// 0-based class index.
    Class(usize),
    Background,
    Ignore,
}

impl MinedLabel {
    /// Numeric code: `1..=C` for classes, `C+1` for background, `-1` for ignore.
    pub fn code(self, num_classes: usize) -> i64 {
        match self {
            MinedLabel::Class(c) => c as i64 + 1,
            MinedLabel::Background => num_classes as i64 + 1,
            MinedLabel::Ignore => -1,
        }
    }

    /// Row of the score table this label points at, `None` when ignored.
    pub fn row(self, num_classes: usize) -> Option<usize> {
        match self {
            MinedLabel::Class(c) => Some(c),
            MinedLabel::Background => Some(num_classes),
            MinedLabel::Ignore => None,
        }
    }
}

/// Per-proposal supervision for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTarget {
    pub labels: Vec<MinedLabel>,
    pub weights: Vec<f64>,
    /// Seed proposal per class, `None` for classes absent from the image.
    pub seeds: Vec<Option<usize>>,
}

impl SupervisionTarget {
    pub fn num_proposals(&self) -> usize {
        self.labels.len()
    }

    /// Supervision under which every proposal is ignored.
    pub fn all_ignored(num_classes: usize, num_proposals: usize) -> Self {
        SupervisionTarget {
            labels: vec![MinedLabel::Ignore; num_proposals],
            weights: vec![1.0; num_proposals],
            seeds: vec![None; num_classes],
        }
    }
}

/// One `(C+1)`-way scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHead {
    pub fc: Linear,
    cache: Option<Matrix>,
}

impl AgentHead {
    pub fn new(fc: Linear) -> Self {
        AgentHead { fc, cache: None }
    }

    pub fn init<R: Rng + ?Sized>(name: &str, width: usize, num_classes: usize, std: f64, rng: &mut R) -> Self {
        AgentHead::new(Linear::gaussian(name, width, num_classes + 1, std, rng))
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        Ok(softmax_over_classes(&self.fc.apply(features)?.transpose()))
    }

    pub fn forward(&mut self, features: &Matrix) -> Result<Matrix> {
        let scores = softmax_over_classes(&self.fc.forward(features)?.transpose());
        self.cache = Some(scores.clone());
        Ok(scores)
    }

    /// Given `dL/dscores`, accumulates gradients and returns `dL/dfeatures`.
    pub fn backward(&mut self, grad_scores: &Matrix) -> Result<Matrix> {
        let scores = self.cache.take().ok_or(Error::BackwardBeforeForward("agent"))?;
        let g = softmax_backward_over_classes(&scores, grad_scores)?;
        self.fc.backward(&g.transpose())
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.fc.params().to_vec()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.fc.params_mut().into_iter().collect()
    }
}

pub fn agent_forward(features: &Matrix, head: &AgentHead, agent: AgentId) -> Result<AgentScores> {
    Ok(AgentScores { scores: head.apply(features)?, agent })
}

/// Index of the highest-scoring proposal in row `class` (lowest index on ties).
///
/// `prev_scores` may carry extra rows (a background row); only row `class`
/// is read. `labels` are the image's class-presence flags.
pub fn select_best_instance(prev_scores: &Matrix, labels: &[bool], class: usize) -> Result<usize> {
    if !labels.get(class).copied().unwrap_or(false) {
        return Err(Error::ClassAbsent(class));
    }
    if class >= prev_scores.rows() || prev_scores.cols() == 0 {
        return Err(Error::ShapeMismatch {
            op: "select_best_instance",
            left: prev_scores.shape_str(),
            right: format!("class {class}"),
        });
    }
    let row = prev_scores.row(class);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Loss weight for a proposal given the seed that claimed it.
///
/// A proposal no seed overlaps takes the strongest seed's score.
fn proposal_weight(assigned_seed_score: f64, best_iou: f64, strongest_seed_score: f64) -> f64 {
    if best_iou > 0.0 {
        assigned_seed_score
    } else {
        strongest_seed_score
    }
}

/// Mines per-proposal labels and weights from the previous score table.
///
/// Only the first `C` rows of `prev_scores` are read, so both the `C×|R|`
/// fused instance-classifier table and a `(C+1)×|R|` agent table work.
/// With `ignore_enabled` a proposal whose best seed IoU `v` satisfies
/// `v ≥ λ` is positive, `λ_ign ≤ v < λ` background, otherwise ignored.
/// Without it everything below `λ` is background.
pub fn build_supervision(
    prev_scores: &Matrix,
    proposals: &[BBox],
    labels: &[bool],
    lambda: f64,
    lambda_ign: f64,
    ignore_enabled: bool,
) -> Result<SupervisionTarget> {
    let num_classes = labels.len();
    if prev_scores.rows() < num_classes || prev_scores.cols() != proposals.len() {
        return Err(Error::ShapeMismatch {
            op: "build_supervision",
            left: prev_scores.shape_str(),
            right: format!("{num_classes} classes x {} proposals", proposals.len()),
        });
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| labels[c]).collect();
    if present.is_empty() {
        return Err(Error::NoPositiveLabel);
    }

    let mut seeds = vec![None; num_classes];
    for &c in &present {
        seeds[c] = Some(select_best_instance(prev_scores, labels, c)?);
    }
    let seed_score = |c: usize| prev_scores[(c, seeds[c].expect("present class has a seed"))];
    let strongest = present.iter().map(|&c| seed_score(c)).fold(f64::NEG_INFINITY, f64::max);

    let mut out_labels = Vec::with_capacity(proposals.len());
    let mut out_weights = Vec::with_capacity(proposals.len());
    for (r, bbox) in proposals.iter().enumerate() {
        // seed that overlaps r most; ties -> higher seed score, then lower class
        let mut best: Option<(usize, f64)> = None;
        for &c in &present {
            let v = iou(&proposals[seeds[c].unwrap()], bbox);
            let better = match best {
                None => true,
                Some((bc, bv)) => v > bv || (v == bv && seed_score(c) > seed_score(bc)),
            };
            if better {
                best = Some((c, v));
            }
        }
        let (class, v) = best.expect("at least one present class");

        // a seed always carries its own class
        let seeded_by =
            present.iter().copied().filter(|&c| seeds[c] == Some(r)).fold(None, |acc: Option<usize>, c| match acc {
                Some(a) if seed_score(a) >= seed_score(c) => Some(a),
                _ => Some(c),
            });

        let (label, weight) = if let Some(c) = seeded_by {
            (MinedLabel::Class(c), seed_score(c))
        } else {
            let label = if v >= lambda {
                MinedLabel::Class(class)
            } else if !ignore_enabled || v >= lambda_ign {
                MinedLabel::Background
            } else {
                MinedLabel::Ignore
            };
            (label, proposal_weight(seed_score(class), v, strongest))
        };
        out_labels.push(label);
        out_weights.push(weight);
    }

    Ok(SupervisionTarget { labels: out_labels, weights: out_weights, seeds })
}

fn check_loss_shapes(scores: &Matrix, sup: &SupervisionTarget) -> Result<()> {
    if scores.cols() != sup.num_proposals() || scores.rows() < 2 {
        return Err(Error::ShapeMismatch {
            op: "agent_loss",
            left: scores.shape_str(),
            right: format!("{} proposals", sup.num_proposals()),
        });
    }
    Ok(())
}

/// Weighted cross-entropy
/// `−(1/|R|) Σ_{r not ignored} w_r ln x[label_r][r]`.
///
/// The divisor is the total proposal count, ignored proposals included.
pub fn agent_loss(scores: &Matrix, sup: &SupervisionTarget) -> Result<f64> {
    check_loss_shapes(scores, sup)?;
    let num_classes = scores.rows() - 1;
    let n = scores.cols() as f64;
    let total: f64 = sup
        .labels
        .iter()
        .zip(&sup.weights)
        .enumerate()
        .filter_map(|(r, (l, &w))| l.row(num_classes).map(|row| w * clamped_ln(scores[(row, r)])))
        .sum();
    Ok(-total / n)
}

/// `dL/dscores` for [`agent_loss`].
pub fn agent_loss_grad(scores: &Matrix, sup: &SupervisionTarget) -> Result<Matrix> {
    check_loss_shapes(scores, sup)?;
    let num_classes = scores.rows() - 1;
    let n = scores.cols() as f64;
    let mut g = Matrix::zeros(scores.rows(), scores.cols());
    for (r, (l, &w)) in sup.labels.iter().zip(&sup.weights).enumerate() {
        if let Some(row) = l.row(num_classes) {
            let p = scores[(row, r)];
            if p > LOG_FLOOR {
                g[(row, r)] = -w / (n * p);
            }
        }
    }
    Ok(g)
}
