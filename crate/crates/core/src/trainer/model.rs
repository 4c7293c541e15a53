use rand::Rng;

use super::TrainConfig;
use crate::data::TrainingView;
use crate::distill::{average_agent_scores, distillation_loss, distillation_supervision};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::midn::{classification_loss, classification_loss_grad, MidnHead, MidnOutput, Trunk};
use crate::numcore::{Differentiable, Matrix, ParamTensor};
use crate::refine::{agent_loss, agent_loss_grad, build_supervision, AgentHead, SupervisionTarget};
use crate::schedule::AggregationSchedule;

/// Trunk, instance classifier, `K` refinement agents and an optional
/// distillation head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub trunk: Trunk,
    pub midn: MidnHead,
    pub agents: Vec<AgentHead>,
    pub distill: Option<AgentHead>,
}

/// All score tables for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub midn: MidnOutput,
    /// `(C+1)×|R|` per refinement agent.
    pub agents: Vec<Matrix>,
    pub distill: Option<Matrix>,
}

/// Mined supervision for every scoring head of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub agents: Vec<SupervisionTarget>,
    pub distill: Option<SupervisionTarget>,
}

/// Individual terms of the combined loss for one image (or a batch mean).
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub class: f64,
    pub agents: Vec<f64>,
    pub distill: Option<f64>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.class + self.distill.unwrap_or(0.0) + self.agents.iter().sum::<f64>()
    }

    /// `(name, value)` for every term, for error reporting.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut v = vec![("L_class".to_string(), self.class)];
        v.extend(self.agents.iter().enumerate().map(|(k, &l)| (format!("L_agent_{}", k + 1), l)));
        if let Some(d) = self.distill {
            v.push(("L_distill".to_string(), d));
        }
        v
    }

    pub(crate) fn accumulate(&mut self, other: &LossTerms, scale: f64) {
        self.class += scale * other.class;
        for (a, b) in self.agents.iter_mut().zip(&other.agents) {
            *a += scale * b;
        }
        if let (Some(a), Some(b)) = (self.distill.as_mut(), other.distill) {
            *a += scale * b;
        }
    }

    pub(crate) fn zeros_like(other: &LossTerms) -> LossTerms {
        LossTerms { class: 0.0, agents: vec![0.0; other.agents.len()], distill: other.distill.map(|_| 0.0) }
    }
}

impl Model {
    /// Fresh model: He-initialized trunk, Gaussian heads with std
    /// `head_std`, zero biases. Parameters are drawn in a fixed order.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        raw_dim: usize,
        width: usize,
        num_classes: usize,
        num_agents: usize,
        distill: bool,
        head_std: f64,
        rng: &mut R,
    ) -> Self {
        let trunk = Trunk::init(raw_dim, width, rng);
        let midn = MidnHead::init(width, num_classes, head_std, rng);
        let agents = (1..=num_agents)
            .map(|k| AgentHead::init(&format!("agent{k}"), width, num_classes, head_std, rng))
            .collect();
        let distill = distill.then(|| AgentHead::init("distill", width, num_classes, head_std, rng));
        Model { trunk, midn, agents, distill }
    }

    pub fn from_config<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Self {
        Self::new(
            config.raw_dim,
            config.trunk_width,
            config.num_classes,
            config.num_agents,
            config.distillation_enabled,
            config.head_init_std,
            rng,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.midn.num_classes()
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Forward pass without caching activations.
    pub fn apply(&self, raw: &Matrix) -> Result<ModelOutput> {
        let features = self.trunk.apply(raw)?;
        Ok(ModelOutput {
            midn: self.midn.apply(&features)?,
            agents: self.agents.iter().map(|a| a.apply(&features)).collect::<Result<_>>()?,
            distill: self.distill.as_ref().map(|d| d.apply(&features)).transpose()?,
        })
    }

    /// Forward pass that caches what [`Model::backward`] needs.
    pub fn forward(&mut self, raw: &Matrix) -> Result<ModelOutput> {
        let features = self.trunk.forward(raw)?;
        Ok(ModelOutput {
            midn: self.midn.forward(&features)?,
            agents: self.agents.iter_mut().map(|a| a.forward(&features)).collect::<Result<_>>()?,
            distill: self.distill.as_mut().map(|d| d.forward(&features)).transpose()?,
        })
    }

    /// Mines labels for every head from the current outputs. Agent 1 reads
    /// the fused instance-classifier table, agent `k>1` reads agent `k−1`,
    /// the distillation head reads the mean of all agents.
    pub fn mine_supervision(
        out: &ModelOutput,
        proposals: &[BBox],
        labels: &[bool],
        lambda: f64,
        lambda_ign: f64,
        ignore_enabled: bool,
    ) -> Result<Supervision> {
        let mut agents = Vec::with_capacity(out.agents.len());
        for k in 0..out.agents.len() {
            let prev = if k == 0 { &out.midn.x_r } else { &out.agents[k - 1] };
            agents.push(build_supervision(prev, proposals, labels, lambda, lambda_ign, ignore_enabled)?);
        }
        let distill = match out.distill {
            Some(_) => {
                let avg = average_agent_scores(&out.agents)?;
                Some(distillation_supervision(&avg, proposals, labels, lambda, lambda_ign, ignore_enabled)?)
            }
            None => None,
        };
        Ok(Supervision { agents, distill })
    }

    pub fn loss_terms(out: &ModelOutput, labels: &[bool], sup: &Supervision) -> Result<LossTerms> {
        Ok(LossTerms {
            class: classification_loss(&out.midn.phi, labels),
            agents: out.agents.iter().zip(&sup.agents).map(|(s, t)| agent_loss(s, t)).collect::<Result<_>>()?,
            distill: match (&out.distill, &sup.distill) {
                (Some(s), Some(t)) => Some(distillation_loss(s, t)?),
                _ => None,
            },
        })
    }

    /// Accumulates `scale · dL/dθ` into every parameter's gradient, holding
    /// the supervision fixed. Must follow [`Model::forward`] on the same image.
    pub fn backward(&mut self, labels: &[bool], out: &ModelOutput, sup: &Supervision, scale: f64) -> Result<()> {
        let mut g_phi = classification_loss_grad(&out.midn.phi, labels);
        g_phi.iter_mut().for_each(|g| *g *= scale);
        let mut g_features = self.midn.backward(&g_phi)?;
        for ((head, scores), target) in self.agents.iter_mut().zip(&out.agents).zip(&sup.agents) {
            let mut g = agent_loss_grad(scores, target)?;
            g.scale(scale);
            g_features.add_assign(&head.backward(&g)?)?;
        }
        if let (Some(head), Some(scores), Some(target)) = (self.distill.as_mut(), &out.distill, &sup.distill) {
            let mut g = agent_loss_grad(scores, target)?;
            g.scale(scale);
            g_features.add_assign(&head.backward(&g)?)?;
        }
        self.trunk.backward(&g_features)
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v = self.trunk.params();
        v.extend(self.midn.params());
        for a in &self.agents {
            v.extend(a.params());
        }
        if let Some(d) = &self.distill {
            v.extend(d.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.trunk.params_mut();
        v.extend(self.midn.params_mut());
        for a in &mut self.agents {
            v.extend(a.params_mut());
        }
        if let Some(d) = &mut self.distill {
            v.extend(d.params_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }
}

/// Combined loss of one image at `step`: instance-classifier loss, plus
/// every refinement agent's loss, plus the distillation loss when the model
/// has a distillation head.
pub fn total_loss(
    view: TrainingView<'_>,
    model: &Model,
    schedule: &AggregationSchedule,
    ignore_enabled: bool,
    step: usize,
) -> Result<LossTerms> {
    let lambda = schedule.lambda_at(step)?;
    let lambda_ign = schedule.lambda_ign_at(step)?;
    let out = model.apply(view.features)?;
    let sup = Model::mine_supervision(&out, view.proposals, view.labels, lambda, lambda_ign, ignore_enabled)?;
    Model::loss_terms(&out, view.labels, &sup)
}

/// The combined loss of one image as a function of the parameters alone,
/// with the mined supervision frozen at construction time.
///
/// Mined weights depend on the parameters through the seed scores, but the
/// training objective treats them as constants; freezing them gives the
/// function whose gradient [`Model::backward`] computes.
pub struct FrozenSupervisionLoss<'a> {
    pub model: Model,
    pub view: TrainingView<'a>,
    pub supervision: Supervision,
}

impl<'a> FrozenSupervisionLoss<'a> {
    pub fn new(
        model: Model,
        view: TrainingView<'a>,
        schedule: &AggregationSchedule,
        ignore_enabled: bool,
        step: usize,
    ) -> Result<Self> {
        let out = model.apply(view.features)?;
        let supervision = Model::mine_supervision(
            &out,
            view.proposals,
            view.labels,
            schedule.lambda_at(step)?,
            schedule.lambda_ign_at(step)?,
            ignore_enabled,
        )?;
        Ok(FrozenSupervisionLoss { model, view, supervision })
    }
}

impl Differentiable for FrozenSupervisionLoss<'_> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.model.params_mut()
    }

    fn loss(&mut self) -> Result<f64> {
        let out = self.model.apply(self.view.features)?;
        Ok(Model::loss_terms(&out, self.view.labels, &self.supervision)?.total())
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        self.model.zero_grad();
        let out = self.model.forward(self.view.features)?;
        let loss = Model::loss_terms(&out, self.view.labels, &self.supervision)?.total();
        self.model.backward(self.view.labels, &out, &self.supervision, 1.0)?;
        Ok(loss)
    }
}

pub(crate) fn check_finite(terms: &LossTerms, step: usize) -> Result<()> {
    match terms.named().into_iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::NonFiniteLoss { step, term }),
        None => Ok(()),
    }
}
