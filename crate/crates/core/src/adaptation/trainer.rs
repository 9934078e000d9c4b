use super::losses::{adversarial_loss_on, uncertainty_discrepancy_on};
use super::schedule::ScheduleState;
use super::{AdaptConfig, Mode};
use crate::data::{BatchIter, DomainBatch, DomainDataset};
use crate::dropout::DropoutMode;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::optim::Sgd;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::uncertainty::{
    adaptive_weights, entropy_uncertainty_on, mc_logits_on, minmax_normalize, variance_uncertainty_on, AdaptiveWeights,
    UncertaintyMetric,
};

/// Scalars recorded for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_c: f64,
    pub l_adv: f64,
    pub l_u: f64,
    /// `l_c + λ_adv·l_adv + λ_u·l_u`.
    pub l_final: f64,
    pub lambda_adv: f64,
    pub lambda_u: f64,
    pub mean_source_u: Option<f64>,
    pub mean_target_u: Option<f64>,
    pub survivor_frac_s: f64,
    pub survivor_frac_t: f64,
    /// Set when every adaptation weight was zero and the adversarial term
    /// was left out of the step.
    pub skipped_adv: bool,
}

/// Owns the model bundle, its optimizer and the step counter.
#[derive(Debug)]
pub struct Trainer {
    bundle: ModelBundle,
    optimizer: Sgd,
    config: AdaptConfig,
    step: u64,
    total_steps: u64,
}

/// Uncertainty quantities taken from the Monte Carlo passes of one step.
struct StepUncertainty {
    /// Per-sample scalar on the tape, `[2B]`, used by the discrepancy term.
    scalar: Var,
    /// Detached conditioning block for the discriminator, `[2B × k]`.
    conditioning: Tensor,
    weights_s: AdaptiveWeights,
    weights_t: AdaptiveWeights,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: AdaptConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let expected = config.uncertainty_dim(bundle.classes());
        if bundle.uncertainty_dim() != expected {
            return Err(Error::shape(
                "trainer",
                format!(
                    "{} mode needs a discriminator conditioned on {expected} uncertainty columns, bundle has {}",
                    config.mode,
                    bundle.uncertainty_dim()
                ),
            ));
        }
        let optimizer = Sgd::new(config.learning_rate, config.momentum, config.weight_decay)?;
        Ok(Self {
            bundle,
            optimizer,
            config,
            step: 0,
            total_steps,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> Result<ScheduleState> {
        let s = ScheduleState::at(self.step, self.total_steps, self.config.gamma, self.config.lambda_u_ratio)?;
        Ok(match self.config.lambda_override {
            Some(l) => s.with_lambda(l),
            None => s,
        })
    }

    /// One optimization step. Errors carry the step number.
    pub fn train_step(&mut self, batch: &DomainBatch) -> Result<LossReport> {
        let report = self.step_inner(batch).map_err(|e| Error::AtStep {
            step: self.step,
            source: Box::new(e),
        })?;
        self.step += 1;
        Ok(report)
    }

    /// Runs every batch of one epoch.
    pub fn run_epoch(
        &mut self,
        source: &DomainDataset,
        target: &DomainDataset,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<LossReport>> {
        BatchIter::new(source, target, batch_size, seed, epoch)?
            .map(|b| self.train_step(&b))
            .collect()
    }

    fn step_inner(&mut self, batch: &DomainBatch) -> Result<LossReport> {
        let b = batch.size();
        if b == 0 {
            return Err(Error::Empty("source batch"));
        }
        if batch.target_x.rows() != b || batch.source_x.rows() != b {
            return Err(Error::shape(
                "train_step",
                format!("{} source rows and {} target rows", batch.source_x.rows(), batch.target_x.rows()),
            ));
        }
        let cfg = self.config.clone();
        let sched = self.schedule()?;
        let (lambda_adv, lambda_u) = (sched.lambda_adv, sched.lambda_u());
        let step = self.step;

        let mut tape = Tape::new();
        let bound = self.bundle.bind(&mut tape);
        // The classification pass follows the Monte Carlo passes 0..T.
        let key = bound.key(step, cfg.mc_passes as u64);

        let x = match cfg.mode {
            Mode::SourceOnly => batch.source_x.clone(),
            _ => Tensor::concat_rows(&[&batch.source_x, &batch.target_x])?,
        };
        let xv = tape.constant(x);

        let unc = if cfg.mode == Mode::UncertaintyFull {
            Some(self.uncertainty(&mut tape, &bound, xv, b, step)?)
        } else {
            None
        };

        let feats = bound.extract_features(&mut tape, xv, DropoutMode::Train, key)?;
        let logits = bound.classify(&mut tape, feats, DropoutMode::Train, key)?;
        let src_logits = if cfg.mode == Mode::SourceOnly {
            logits
        } else {
            tape.slice_rows(logits, 0, b)?
        };
        let probs = tape.softmax_temp(src_logits, cfg.tau_c)?;
        let l_c = tape.cross_entropy(probs, &batch.source_y)?;

        let mut total = l_c;
        let mut report = LossReport {
            step,
            l_c: tape.value(l_c).item(),
            l_adv: 0.0,
            l_u: 0.0,
            l_final: 0.0,
            lambda_adv,
            lambda_u,
            mean_source_u: None,
            mean_target_u: None,
            survivor_frac_s: 1.0,
            survivor_frac_t: 1.0,
            skipped_adv: false,
        };

        if cfg.mode != Mode::SourceOnly {
            let fs = tape.slice_rows(feats, 0, b)?;
            let ft = tape.slice_rows(feats, b, b)?;
            let d_key = bound.key(step, cfg.mc_passes as u64 + 1);
            let adv = match &unc {
                None => {
                    let ones = vec![1.0; b];
                    adversarial_loss_on(&mut tape, &bound, fs, ft, None, None, &ones, &ones, lambda_adv, d_key)
                }
                Some(u) => {
                    let cond = tape.constant(u.conditioning.clone());
                    let cs = tape.slice_rows(cond, 0, b)?;
                    let ct = tape.slice_rows(cond, b, b)?;
                    adversarial_loss_on(
                        &mut tape,
                        &bound,
                        fs,
                        ft,
                        Some(cs),
                        Some(ct),
                        &u.weights_s.weights,
                        &u.weights_t.weights,
                        lambda_adv,
                        d_key,
                    )
                }
            };
            match adv {
                Ok(l_adv) => {
                    report.l_adv = tape.value(l_adv).item();
                    total = tape.add(total, l_adv)?;
                }
                Err(Error::AllWeightsZero) => {
                    log::debug!("step {step}: every adaptation weight is zero, adversarial term skipped");
                    report.skipped_adv = true;
                }
                Err(e) => return Err(e),
            }
        }

        if let Some(u) = &unc {
            let mut us = tape.slice_rows(u.scalar, 0, b)?;
            if cfg.lu_detach_source {
                let fixed = tape.value(us).detached();
                us = tape.constant(fixed);
            }
            let ut = tape.slice_rows(u.scalar, b, b)?;
            let l_u = uncertainty_discrepancy_on(&mut tape, us, ut, cfg.discrepancy_q)?;
            report.l_u = tape.value(l_u).item();
            report.mean_source_u = Some(tape.value(us).values().iter().sum::<f64>() / b as f64);
            report.mean_target_u = Some(tape.value(ut).values().iter().sum::<f64>() / b as f64);
            report.survivor_frac_s = u.weights_s.survivor_fraction();
            report.survivor_frac_t = u.weights_t.survivor_fraction();
            let weighted = tape.scale(l_u, lambda_u)?;
            total = tape.add(total, weighted)?;
        }

        report.l_final = report.l_c + lambda_adv * report.l_adv + lambda_u * report.l_u;
        if !report.l_final.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }

        let grads = tape.backward(total)?;
        drop(tape);
        let trained = match cfg.mode {
            Mode::SourceOnly => 0..self.bundle.classifier_params().end,
            _ => 0..self.bundle.discriminator_params().end,
        };
        let mut params = self.bundle.params_mut();
        let params = &mut params[trained];
        grads.accumulate_into(params)?;
        self.optimizer.step(params)?;
        Ok(report)
    }

    fn uncertainty(
        &self,
        tape: &mut Tape,
        bound: &crate::models::BoundBundle,
        xv: Var,
        b: usize,
        step: u64,
    ) -> Result<StepUncertainty> {
        let cfg = &self.config;
        let frozen = cfg
            .lu_generator_only
            .then(|| self.bundle.bind_frozen_classifier(tape));
        let logits = mc_logits_on(tape, bound, frozen.as_ref(), xv, cfg.mc_passes, step)?;
        let classes = self.bundle.classes();
        let (scalar, conditioning, for_weights) = match cfg.metric {
            UncertaintyMetric::Entropy => {
                let h = entropy_uncertainty_on(tape, &logits, cfg.tau)?;
                let u = tape.scale(h, 1.0 / (classes as f64).ln())?;
                let vals = tape.value(u).values().to_vec();
                let cond = Tensor::matrix(2 * b, 1, vals.clone())?;
                (u, cond, vals)
            }
            UncertaintyMetric::Variance => {
                let (per_class, scalar) = variance_uncertainty_on(tape, &logits)?;
                let cond = tape.value(per_class).detached();
                let vals = minmax_normalize(tape.value(scalar).values());
                (scalar, cond, vals)
            }
        };
        Ok(StepUncertainty {
            scalar,
            conditioning,
            weights_s: adaptive_weights(&for_weights[..b], cfg.t_u),
            weights_t: adaptive_weights(&for_weights[b..], cfg.t_u),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::models::BundleSpec;

    fn setup(mode: Mode, metric: UncertaintyMetric) -> (Trainer, DomainBatch) {
        let cfg = AdaptConfig {
            mode,
            metric,
            mc_passes: 4,
            ..AdaptConfig::default()
        };
        let spec = BundleSpec::mlp(2, &[8, 6], 2, cfg.uncertainty_dim(2), &[5], 0.5, false).unwrap();
        let bundle = ModelBundle::new(spec, 1, 2).unwrap();
        let s = gen_two_moons(16, 0.1, 0).unwrap();
        let t = gen_two_moons(16, 0.1, 1).unwrap();
        let batch = BatchIter::new(&s, &t, 8, 0, 0).unwrap().next().unwrap();
        (Trainer::new(bundle, cfg, 10).unwrap(), batch)
    }

    #[test]
    fn reports_are_finite_in_every_mode() {
        for (mode, metric) in [
            (Mode::SourceOnly, UncertaintyMetric::Entropy),
            (Mode::AdversarialPlain, UncertaintyMetric::Entropy),
            (Mode::UncertaintyFull, UncertaintyMetric::Entropy),
            (Mode::UncertaintyFull, UncertaintyMetric::Variance),
        ] {
            let (mut tr, batch) = setup(mode, metric);
            let r = tr.train_step(&batch).unwrap();
            assert!(r.l_final.is_finite());
            assert_eq!(r.lambda_adv, 0.0);
            assert_eq!(r.mean_source_u.is_some(), mode == Mode::UncertaintyFull);
            assert_eq!(tr.steps_done(), 1);
        }
    }

    #[test]
    fn source_only_leaves_discriminator_alone() {
        let (mut tr, batch) = setup(Mode::SourceOnly, UncertaintyMetric::Entropy);
        let before: Vec<Tensor> = tr.bundle().params().into_iter().cloned().collect();
        tr.train_step(&batch).unwrap();
        let after = tr.bundle().params();
        let d = tr.bundle().discriminator_params();
        for i in d {
            assert_eq!(before[i].values(), after[i].values());
        }
        assert_ne!(before[0].values(), after[0].values());
    }

    #[test]
    fn mismatched_conditioning_rejected() {
        let spec = BundleSpec::mlp(2, &[8], 2, 0, &[5], 0.5, false).unwrap();
        let bundle = ModelBundle::new(spec, 1, 2).unwrap();
        assert!(Trainer::new(bundle, AdaptConfig::default(), 10).is_err());
    }

    #[test]
    fn lambda_override_applies() {
        let (mut tr, batch) = setup(Mode::UncertaintyFull, UncertaintyMetric::Entropy);
        tr.config.lambda_override = Some(0.7);
        let r = tr.train_step(&batch).unwrap();
        assert_eq!(r.lambda_adv, 0.7);
        assert!((r.lambda_u - 0.175).abs() < 1e-15);
    }
}
