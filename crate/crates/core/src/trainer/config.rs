use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::{AggregationSchedule, LambdaMode};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_classes: usize,
    /// Number of refinement agents `K`.
    pub num_agents: usize,
    pub raw_dim: usize,
    pub trunk_width: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// `(first step, learning rate)` pairs; thresholds strictly increasing,
    /// the first one 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lb: f64,
    pub lambda_max: f64,
    pub lambda_mode: LambdaMode,
    pub lambda_floor: f64,
    pub distillation_enabled: bool,
    pub ignore_enabled: bool,
    /// Std of the Gaussian init of the scoring heads.
    pub head_init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_classes: 5,
            num_agents: 3,
            raw_dim: 32,
            trunk_width: 64,
            total_steps: 2000,
            batch_size: 2,
            lr_schedule: vec![(0, 0.01), (1400, 0.001)],
            momentum: 0.9,
            weight_decay: 5e-4,
            lb: 100.0,
            lambda_max: 0.51,
            lambda_mode: LambdaMode::Adaptive,
            lambda_floor: 0.0,
            distillation_enabled: true,
            ignore_enabled: true,
            head_init_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Two-phase schedule: `lr` for the first 70% of `total_steps`, `lr/10`
    /// afterwards.
    pub fn step_lr_schedule(total_steps: usize, lr: f64) -> Vec<(usize, f64)> {
        let drop = (total_steps as f64 * 0.7).round() as usize;
        if drop == 0 {
            vec![(0, lr)]
        } else {
            vec![(0, lr), (drop, lr / 10.0)]
        }
    }

    /// Parses `step:lr,step:lr,...`.
    pub fn parse_lr_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
        s.split(',')
            .map(|part| {
                let (step, lr) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidConfig(format!("lr schedule entry `{part}` is not step:lr")))?;
                let step = step.parse().map_err(|e| Error::InvalidConfig(format!("lr schedule step `{step}`: {e}")))?;
                let lr = lr.parse().map_err(|e| Error::InvalidConfig(format!("lr schedule rate `{lr}`: {e}")))?;
                Ok((step, lr))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes == 0 || self.raw_dim == 0 || self.trunk_width == 0 {
            return bad("num_classes, raw_dim and trunk_width must be positive".into());
        }
        if self.num_agents == 0 {
            return bad("need at least one refinement agent".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return bad("lr schedule must start at step 0".into()),
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("lr schedule thresholds must be strictly increasing".into());
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1), weight decay be non-negative".into());
        }
        if !(self.head_init_std >= 0.0 && self.head_init_std.is_finite()) {
            return bad("head_init_std must be finite and non-negative".into());
        }
        if self.total_steps > 0 {
            self.schedule()?;
        }
        Ok(())
    }

    /// The aggregation schedule over `total_steps` (at least one step).
    pub fn schedule(&self) -> Result<AggregationSchedule> {
        AggregationSchedule {
            lb: self.lb,
            total_steps: self.total_steps.max(1),
            lambda_max: self.lambda_max,
            mode: self.lambda_mode,
            floor: self.lambda_floor,
        }
        .validated()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_schedule.iter().take_while(|(t, _)| *t <= step).last().map(|&(_, lr)| lr).unwrap_or(0.0)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn lr_lookup() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(1399), 0.01);
        assert_eq!(c.lr_at(1400), 0.001);
        assert_eq!(c.lr_at(1999), 0.001);
    }

    #[test]
    fn lr_schedule_parsing_and_validation() {
        assert_eq!(TrainConfig::parse_lr_schedule("0:0.01,1400:0.001").unwrap(), vec![(0, 0.01), (1400, 0.001)]);
        assert!(TrainConfig::parse_lr_schedule("0-0.01").is_err());
        let c = TrainConfig { lr_schedule: vec![(0, 0.1), (5, 0.1), (5, 0.01)], ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lr_schedule: vec![(3, 0.1)], ..TrainConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::step_lr_schedule(2000, 0.01), vec![(0, 0.01), (1400, 0.001)]);
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(TrainConfig { num_agents: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
