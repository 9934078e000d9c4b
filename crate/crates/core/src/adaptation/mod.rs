//! Adversarial domain adaptation: the λ schedule, the three losses, the
//! training step and Monte Carlo evaluation.

mod eval;
mod losses;
mod schedule;
mod trainer;

pub use eval::{evaluate, EvalConfig, EvalMetrics, EvalMode, EVAL_STEP};
pub use losses::{
    adversarial_loss_on, classification_loss, classification_loss_on, uncertainty_discrepancy,
    uncertainty_discrepancy_on, weighted_domain_bce,
};
pub use schedule::{lambda_schedule, ScheduleState};
pub use trainer::{LossReport, Trainer};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::uncertainty::UncertaintyMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Classifier trained on source labels only.
    SourceOnly,
    /// Unweighted, unconditioned adversarial alignment.
    AdversarialPlain,
    /// Uncertainty-conditioned discriminator, adaptive weights and the
    /// uncertainty discrepancy term.
    UncertaintyFull,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::AdversarialPlain => "adversarial_plain",
            Mode::UncertaintyFull => "uncertainty_full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Mode::SourceOnly),
            "adversarial_plain" => Ok(Mode::AdversarialPlain),
            "uncertainty_full" => Ok(Mode::UncertaintyFull),
            other => Err(Error::invalid(
                "mode",
                format!("unknown mode `{other}` (expected source_only, adversarial_plain or uncertainty_full)"),
            )),
        }
    }
}

impl UncertaintyMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyMetric::Entropy => "entropy",
            UncertaintyMetric::Variance => "variance",
        }
    }
}

impl FromStr for UncertaintyMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(UncertaintyMetric::Entropy),
            "variance" => Ok(UncertaintyMetric::Variance),
            other => Err(Error::invalid(
                "uncertainty_metric",
                format!("unknown metric `{other}` (expected entropy or variance)"),
            )),
        }
    }
}

/// Hyperparameters of the adaptation objective and its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub mode: Mode,
    pub metric: UncertaintyMetric,
    pub mc_passes: usize,
    /// Softmax temperature for uncertainty estimates.
    pub tau: f64,
    /// Softmax temperature for the classification loss.
    pub tau_c: f64,
    /// Samples with uncertainty above this get zero adaptation weight.
    pub t_u: f64,
    pub gamma: f64,
    pub lambda_u_ratio: f64,
    pub discrepancy_q: u32,
    /// Fixed λ_adv in place of the schedule.
    pub lambda_override: Option<f64>,
    /// Route the discrepancy gradient to the feature extractor only.
    pub lu_generator_only: bool,
    /// Treat the source uncertainty in the discrepancy term as a constant.
    pub lu_detach_source: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::UncertaintyFull,
            metric: UncertaintyMetric::Entropy,
            mc_passes: 12,
            tau: 1.5,
            tau_c: 1.8,
            t_u: 0.2,
            gamma: -10.0,
            lambda_u_ratio: 0.25,
            discrepancy_q: 2,
            lambda_override: None,
            lu_generator_only: false,
            lu_detach_source: false,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive and finite, got {v}")))
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_passes < 1 {
            return Err(Error::invalid("mc_passes", "need at least one Monte Carlo pass"));
        }
        positive("tau", self.tau)?;
        positive("tau_c", self.tau_c)?;
        positive("learning_rate", self.learning_rate)?;
        if !(0.0..=1.0).contains(&self.t_u) {
            return Err(Error::invalid("t_u", format!("must lie in [0, 1], got {}", self.t_u)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma", "must be finite"));
        }
        if !(self.lambda_u_ratio >= 0.0 && self.lambda_u_ratio.is_finite()) {
            return Err(Error::invalid("lambda_u_ratio", "must be non-negative"));
        }
        if !(self.discrepancy_q == 1 || self.discrepancy_q == 2) {
            return Err(Error::invalid("discrepancy_q", format!("must be 1 or 2, got {}", self.discrepancy_q)));
        }
        if let Some(l) = self.lambda_override {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid("lambda_override", format!("must be non-negative, got {l}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// Width of the uncertainty block appended to the discriminator input.
    pub fn uncertainty_dim(&self, classes: usize) -> usize {
        match self.mode {
            Mode::UncertaintyFull => self.metric.conditioning_dim(classes),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_round_trip() {
        for m in [Mode::SourceOnly, Mode::AdversarialPlain, Mode::UncertaintyFull] {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("dann".parse::<Mode>().is_err());
        assert_eq!("variance".parse::<UncertaintyMetric>().unwrap(), UncertaintyMetric::Variance);
    }

    #[test]
    fn defaults_validate() {
        AdaptConfig::default().validate().unwrap();
        let bad = AdaptConfig {
            t_u: 1.5,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_q = AdaptConfig {
            discrepancy_q: 3,
            ..AdaptConfig::default()
        };
        assert!(bad_q.validate().is_err());
    }

    #[test]
    fn conditioning_width_by_mode() {
        let mut c = AdaptConfig::default();
        assert_eq!(c.uncertainty_dim(4), 1);
        c.metric = UncertaintyMetric::Variance;
        assert_eq!(c.uncertainty_dim(4), 4);
        c.mode = Mode::AdversarialPlain;
        assert_eq!(c.uncertainty_dim(4), 0);
    }
}
