//! The supervision-aggregation thresholds.
//!
//! In adaptive mode the positive-IoU threshold grows logarithmically from 0
//! at the first step to 0.5 at the last:
//!
//! ```text
//! λ(s) = ½ · (ln(s + l_b) − ln l_b) / (ln(S + l_b) − ln l_b)
//! ```
//!
//! and the ignore threshold mirrors it, `λ_ign(s) = λ_max − λ(s)`. `l_b`
//! controls how fast λ rises; `λ_max` is where λ_ign starts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Constant positive threshold.
    Fixed(f64),
    Adaptive,
}

impl std::fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaMode::Fixed(v) => write!(f, "fixed:{v}"),
            LambdaMode::Adaptive => write!(f, "adaptive"),
        }
    }
}

impl std::str::FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "adaptive" {
            return Ok(LambdaMode::Adaptive);
        }
        let v = s.strip_prefix("fixed:").ok_or_else(|| format!("expected `adaptive` or `fixed:<value>`, got `{s}`"))?;
        let v: f64 = v.parse().map_err(|e| format!("bad fixed lambda `{v}`: {e}"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("fixed lambda {v} outside [0, 1]"));
        }
        Ok(LambdaMode::Fixed(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationSchedule {
    /// Growth-velocity constant `l_b`.
    pub lb: f64,
    pub total_steps: usize,
    pub lambda_max: f64,
    pub mode: LambdaMode,
    /// Optional lower bound on λ. Zero reproduces the plain curve.
    #[serde(default)]
    pub floor: f64,
}

impl AggregationSchedule {
    pub fn adaptive(lb: f64, total_steps: usize, lambda_max: f64) -> Result<Self> {
        Self { lb, total_steps, lambda_max, mode: LambdaMode::Adaptive, floor: 0.0 }.validated()
    }

    pub fn fixed(lambda: f64, total_steps: usize, lambda_max: f64) -> Result<Self> {
        Self { lb: 100.0, total_steps, lambda_max, mode: LambdaMode::Fixed(lambda), floor: 0.0 }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lb > 0.0 && self.lb.is_finite()) {
            return bad(format!("l_b must be positive, got {}", self.lb));
        }
        if self.total_steps == 0 {
            return bad("schedule needs at least one step".into());
        }
        if !(self.lambda_max > 0.0 && self.lambda_max <= 1.0) {
            return bad(format!("lambda_max must lie in (0, 1], got {}", self.lambda_max));
        }
        if !(0.0..=0.5).contains(&self.floor) {
            return bad(format!("lambda floor must lie in [0, 0.5], got {}", self.floor));
        }
        if let LambdaMode::Fixed(v) = self.mode {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("fixed lambda must lie in [0, 1], got {v}"));
            }
        }
        Ok(self)
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange { step, total: self.total_steps });
        }
        Ok(())
    }

    /// Positive-assignment IoU threshold at `step`.
    pub fn lambda_at(&self, step: usize) -> Result<f64> {
        self.check_step(step)?;
        let raw = match self.mode {
            LambdaMode::Fixed(v) => v,
            LambdaMode::Adaptive => {
                let s = step as f64;
                let total = self.total_steps as f64;
                0.5 * ((s + self.lb).ln() - self.lb.ln()) / ((total + self.lb).ln() - self.lb.ln())
            }
        };
        Ok(raw.max(self.floor))
    }

    /// Ignore threshold, `λ_max − λ(step)`.
    pub fn lambda_ign_at(&self, step: usize) -> Result<f64> {
        Ok(self.lambda_max - self.lambda_at(step)?)
    }

    /// Step (continuous) where λ and λ_ign cross, i.e. `λ(s*) = λ_max / 2`.
    /// Only defined for the adaptive curve when `λ_max ≤ 1`.
    pub fn crossover_step(&self) -> Option<f64> {
        match self.mode {
            LambdaMode::Adaptive => {
                let total = self.total_steps as f64;
                Some(self.lb * ((total + self.lb) / self.lb).powf(self.lambda_max) - self.lb)
            }
            LambdaMode::Fixed(_) => None,
        }
    }

    /// `(step, λ, λ_ign)` at `samples` evenly spaced steps covering `[0, S]`.
    pub fn sample(&self, samples: usize) -> Result<Vec<(usize, f64, f64)>> {
        let samples = samples.max(2);
        let mut steps: Vec<usize> = (0..samples)
            .map(|i| ((i as f64) * self.total_steps as f64 / (samples - 1) as f64).round() as usize)
            .collect();
        steps.dedup();
        steps.into_iter().map(|s| Ok((s, self.lambda_at(s)?, self.lambda_ign_at(s)?))).collect()
    }

    /// `(step, λ, λ_ign)` at every `stride`-th step, always ending at `S`.
    pub fn sample_every(&self, stride: usize) -> Result<Vec<(usize, f64, f64)>> {
        let stride = stride.max(1);
        let mut steps: Vec<usize> = (0..=self.total_steps).step_by(stride).collect();
        if steps.last() != Some(&self.total_steps) {
            steps.push(self.total_steps);
        }
        steps.into_iter().map(|s| Ok((s, self.lambda_at(s)?, self.lambda_ign_at(s)?))).collect()
    }

    /// CSV `step,lambda,lambda_ign`, one row every `stride` steps.
    pub fn to_csv(&self, stride: usize) -> Result<String> {
        let mut out = String::from("step,lambda,lambda_ign\n");
        for (s, l, li) in self.sample_every(stride)? {
            out.push_str(&format!("{s},{l},{li}\n"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule(total: usize) -> AggregationSchedule {
        AggregationSchedule::adaptive(100.0, total, 0.51).unwrap()
    }

    #[test]
    fn endpoints() {
        let s = default_schedule(2000);
        assert_eq!(s.lambda_at(0).unwrap(), 0.0);
        assert!((s.lambda_at(2000).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(s.lambda_ign_at(0).unwrap(), 0.51);
        assert!((s.lambda_ign_at(2000).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mid_curve_value() {
        // ½·ln(10)/ln(601)
        let s = default_schedule(60_000);
        assert!((s.lambda_at(900).unwrap() - 0.179_929).abs() < 5e-7);
        assert!((s.lambda_ign_at(900).unwrap() - 0.330_071).abs() < 5e-7);
    }

    #[test]
    fn out_of_range_step() {
        let s = default_schedule(10);
        assert!(matches!(s.lambda_at(11), Err(Error::StepOutOfRange { step: 11, total: 10 })));
        assert!(s.lambda_ign_at(11).is_err());
    }

    #[test]
    fn fixed_mode_and_floor() {
        let s = AggregationSchedule::fixed(0.5, 100, 0.51).unwrap();
        assert_eq!(s.lambda_at(0).unwrap(), 0.5);
        assert_eq!(s.lambda_at(100).unwrap(), 0.5);
        assert!(s.crossover_step().is_none());

        let mut f = default_schedule(100);
        f.floor = 0.1;
        assert_eq!(f.lambda_at(0).unwrap(), 0.1);
        assert!((f.lambda_at(100).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(AggregationSchedule::adaptive(0.0, 10, 0.51).is_err());
        assert!(AggregationSchedule::adaptive(100.0, 0, 0.51).is_err());
        assert!(AggregationSchedule::adaptive(100.0, 10, 1.5).is_err());
    }

    #[test]
    fn parse_mode() {
        assert_eq!("adaptive".parse::<LambdaMode>().unwrap(), LambdaMode::Adaptive);
        assert_eq!("fixed:0.5".parse::<LambdaMode>().unwrap(), LambdaMode::Fixed(0.5));
        assert!("fixed:2".parse::<LambdaMode>().is_err());
        assert!("linear".parse::<LambdaMode>().is_err());
        assert_eq!(LambdaMode::Fixed(0.5).to_string(), "fixed:0.5");
    }

    #[test]
    fn monotone_complementary_and_bounded() {
        let s = default_schedule(60_000);
        let rows = s.sample(1001).unwrap();
        assert_eq!(rows.len(), 1001);
        for w in rows.windows(2) {
            assert!(w[1].1 > w[0].1);
            assert!(w[1].2 < w[0].2);
        }
        for &(_, l, li) in &rows {
            assert!((0.0..=0.5).contains(&l));
            assert!((l + li - 0.51).abs() <= 1e-15);
        }
    }

    #[test]
    fn crossover_matches_bisection() {
        for (lb, total, lmax) in [(100.0, 60_000, 0.51), (100.0, 2000, 0.51), (10.0, 500, 0.8)] {
            let s = AggregationSchedule::adaptive(lb, total, lmax).unwrap();
            // continuous λ for bisection; lambda_at only takes integer steps
            let lam = |x: f64| 0.5 * ((x + lb).ln() - lb.ln()) / ((total as f64 + lb).ln() - lb.ln());
            let (mut lo, mut hi) = (0.0f64, total as f64);
            while hi - lo > 1e-10 {
                let mid = 0.5 * (lo + hi);
                if lam(mid) < lmax - lam(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let analytic = s.crossover_step().unwrap();
            assert!((analytic - lo).abs() < 1e-6 * total as f64, "{analytic} vs {lo}");
            let before = analytic.floor() as usize;
            assert!(s.lambda_at(before).unwrap() <= s.lambda_ign_at(before).unwrap());
            assert!(s.lambda_at(before + 1).unwrap() >= s.lambda_ign_at(before + 1).unwrap());
        }
    }

    #[test]
    fn csv_dump() {
        let csv = default_schedule(60_000).to_csv(1000).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,lambda,lambda_ign"));
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 61);
        assert_eq!(rows[0][1], 0.0);
        assert!((rows[60][1] - 0.5).abs() < 1e-12);
        assert_eq!(rows[60][0], 60_000.0);

        let fine = default_schedule(60_000).to_csv(100).unwrap();
        let row = fine.lines().find(|l| l.starts_with("900,")).unwrap();
        let lambda: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((lambda - 0.179_929).abs() < 5e-7);

        let odd = default_schedule(10).sample_every(3).unwrap();
        assert_eq!(odd.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 3, 6, 9, 10]);
    }
}
