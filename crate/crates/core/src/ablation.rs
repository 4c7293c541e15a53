//! The five-arm ablation protocol.
//!
//! | arm | K | λ        | ignore band | distillation |
//! |-----|---|----------|-------------|--------------|
//! | ID1 | 3 | 0.5      | no          | no           |
//! | ID2 | 3 | adaptive | no          | no           |
//! | ID3 | 3 | adaptive | yes         | no           |
//! | ID4 | 3 | adaptive | yes         | yes          |
//! | ID5 | 4 | adaptive | yes         | no           |

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::Result;
use crate::eval::{evaluate, ApMethod};
use crate::schedule::LambdaMode;
use crate::trainer::{infer_all, train, HeadSelection, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Id1,
    Id2,
    Id3,
    Id4,
    Id5,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Id1, Arm::Id2, Arm::Id3, Arm::Id4, Arm::Id5];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Id1 => "ID1",
            Arm::Id2 => "ID2",
            Arm::Id3 => "ID3",
            Arm::Id4 => "ID4",
            Arm::Id5 => "ID5",
        }
    }

    pub fn num_agents(self) -> usize {
        if self == Arm::Id5 {
            4
        } else {
            3
        }
    }

    pub fn lambda_mode(self) -> LambdaMode {
        if self == Arm::Id1 {
            LambdaMode::Fixed(0.5)
        } else {
            LambdaMode::Adaptive
        }
    }

    pub fn ignore(self) -> bool {
        matches!(self, Arm::Id3 | Arm::Id4 | Arm::Id5)
    }

    pub fn distillation(self) -> bool {
        self == Arm::Id4
    }

    /// `base` with this arm's K, λ mode, ignore band and distillation.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            num_agents: self.num_agents(),
            lambda_mode: self.lambda_mode(),
            ignore_enabled: self.ignore(),
            distillation_enabled: self.distillation(),
            ..base.clone()
        }
    }
}

/// Metrics of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub map: f64,
    pub corloc: f64,
    /// CorLoc on the training images.
    pub corloc_train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: Vec<RunMetrics>,
    pub median: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
}

/// Median; mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Trains `config` and evaluates it with the default head selection.
pub fn run_once(train_set: &[ImageSample], test_set: &[ImageSample], config: &TrainConfig) -> Result<RunMetrics> {
    let model = train(train_set, config)?.checkpoint.model()?;
    let heads = HeadSelection::default();
    let test_dets = infer_all(test_set, &model, heads, 0.3)?;
    let test = evaluate(test_set, &test_dets, config.num_classes, ApMethod::ElevenPoint)?;
    let train_dets = infer_all(train_set, &model, heads, 0.3)?;
    let train_report = evaluate(train_set, &train_dets, config.num_classes, ApMethod::ElevenPoint)?;
    Ok(RunMetrics {
        map: test.map.unwrap_or(0.0),
        corloc: test.corloc.unwrap_or(0.0),
        corloc_train: train_report.corloc.unwrap_or(0.0),
    })
}

/// Runs every arm for every seed (in parallel) on fixed train/test sets.
/// Seeds vary initialization and batch order; `base.seed` is ignored.
pub fn run_ablation(
    train_set: &[ImageSample],
    test_set: &[ImageSample],
    base: &TrainConfig,
    seeds: &[u64],
    arms: &[Arm],
) -> Result<AblationReport> {
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let results: Vec<RunMetrics> = jobs
        .par_iter()
        .map(|&(arm, seed)| run_once(train_set, test_set, &TrainConfig { seed, ..arm.configure(base) }))
        .collect::<Result<_>>()?;
    let arms = arms
        .iter()
        .enumerate()
        .map(|(i, &arm)| {
            let runs = results[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let med = |f: fn(&RunMetrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
            let median =
                RunMetrics { map: med(|r| r.map), corloc: med(|r| r.corloc), corloc_train: med(|r| r.corloc_train) };
            ArmSummary { arm, runs, median }
        })
        .collect();
    Ok(AblationReport { seeds: seeds.to_vec(), arms })
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// Median metrics per arm, in percent, one row per arm.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<4} {:>2} {:>9} {:>9} {:>8} {:>7} {:>7} {:>13}\n",
            "arm", "K", "lambda", "lambda_ign", "distill", "mAP", "CorLoc", "CorLoc(train)"
        );
        for a in &self.arms {
            let lambda = match a.arm.lambda_mode() {
                LambdaMode::Fixed(v) => format!("{v}"),
                LambdaMode::Adaptive => "adaptive".into(),
            };
            out.push_str(&format!(
                "{:<4} {:>2} {:>9} {:>10} {:>8} {:>7.1} {:>7.1} {:>13.1}\n",
                a.arm.name(),
                a.arm.num_agents(),
                lambda,
                if a.arm.ignore() { "adaptive" } else { "-" },
                if a.arm.distillation() { "yes" } else { "no" },
                100.0 * a.median.map,
                100.0 * a.median.corloc,
                100.0 * a.median.corloc_train
            ));
        }
        out
    }

    /// `arm,seed,map,corloc,corloc_train` for every run, then `median` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,map,corloc,corloc_train\n");
        for a in &self.arms {
            for (seed, r) in self.seeds.iter().zip(&a.runs) {
                out.push_str(&format!("{},{},{},{},{}\n", a.arm.name(), seed, r.map, r.corloc, r.corloc_train));
            }
            let m = a.median;
            out.push_str(&format!("{},median,{},{},{}\n", a.arm.name(), m.map, m.corloc, m.corloc_train));
        }
        out
    }
}
