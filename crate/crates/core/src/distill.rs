//! Distillation head supervision.
//!
//! The distillation head has the same architecture as a refinement agent;
//! only its supervision source differs. Instead of the previous agent's
//! table it mines labels from the elementwise mean of all `K` refinement
//! tables, so what each agent learned reaches the extra head directly
//! rather than only through the cascade.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::Matrix;
use crate::refine::{agent_loss, build_supervision, SupervisionTarget};

/// Elementwise mean of `K ≥ 1` equally-shaped score tables.
pub fn average_agent_scores(tables: &[Matrix]) -> Result<Matrix> {
    let first = tables.first().ok_or(Error::EmptyAgentList)?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for t in tables {
        sum.add_assign(t)?;
    }
    let k = tables.len() as f64;
    Ok(sum.map(|v| v / k))
}

/// Mines supervision from the averaged table exactly as a refinement agent
/// would from its predecessor (the background row is not used for seeding).
pub fn distillation_supervision(
    averaged: &Matrix,
    proposals: &[BBox],
    labels: &[bool],
    lambda: f64,
    lambda_ign: f64,
    ignore_enabled: bool,
) -> Result<SupervisionTarget> {
    build_supervision(averaged, proposals, labels, lambda, lambda_ign, ignore_enabled)
}

/// Same weighted loss as the refinement agents.
pub fn distillation_loss(scores: &Matrix, sup: &SupervisionTarget) -> Result<f64> {
    agent_loss(scores, sup)
}
