//! Monte Carlo dropout prediction and the uncertainty summaries built on it.
//!
//! A prediction is the average of `T` tempered softmaxes, each from a forward
//! pass with its own dropout mask. Two scalar summaries are derived per
//! sample: the entropy of that average, and the class-mean variance of the
//! raw logits across passes.

use crate::dropout::DropoutMode;
use crate::error::{Error, Result};
use crate::models::{BoundBundle, BoundNetwork, ModelBundle};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// Which per-sample summary drives conditioning and reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyMetric {
    Entropy,
    Variance,
}

impl UncertaintyMetric {
    /// Width of the uncertainty block the discriminator is conditioned on.
    pub fn conditioning_dim(self, classes: usize) -> usize {
        match self {
            UncertaintyMetric::Entropy => 1,
            UncertaintyMetric::Variance => classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct McPrediction {
    /// One `[B×C]` logit matrix per pass.
    pub pass_logits: Vec<Tensor>,
    /// Average of the tempered softmaxes, `[B×C]`.
    pub mean_probs: Tensor,
    /// Raw entropy of each row of `mean_probs`, in `[0, ln C]`.
    pub entropy_u: Vec<f64>,
    /// `entropy_u / ln C`, in `[0, 1]`.
    pub entropy_norm: Vec<f64>,
    /// Class-mean logit variance across passes.
    pub variance_u: Vec<f64>,
    pub passes: usize,
    pub tau: f64,
}

impl McPrediction {
    /// Mean of `softmax(logits / tau)` over passes at a different temperature.
    pub fn mean_probs_at(&self, tau: f64) -> Result<Tensor> {
        mean_tempered_probs(&self.pass_logits, tau)
    }

    /// Arg-max class of the pass-averaged distribution at temperature `tau`.
    pub fn predictions_at(&self, tau: f64) -> Result<Vec<usize>> {
        let probs = self.mean_probs_at(tau)?;
        Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
    }

    pub fn uncertainty(&self, metric: UncertaintyMetric) -> &[f64] {
        match metric {
            UncertaintyMetric::Entropy => &self.entropy_norm,
            UncertaintyMetric::Variance => &self.variance_u,
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn mean_tempered_probs(pass_logits: &[Tensor], tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("temperature must be positive, got {tau}")));
    }
    let first = pass_logits.first().ok_or(Error::Empty("pass list"))?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut acc = vec![0.0; rows * cols];
    for logits in pass_logits {
        for r in 0..rows {
            for (a, p) in acc[r * cols..(r + 1) * cols].iter_mut().zip(tape::softmax_row(logits.row(r), tau)) {
                *a += p;
            }
        }
    }
    let t = pass_logits.len() as f64;
    acc.iter_mut().for_each(|a| *a /= t);
    Tensor::new(vec![rows, cols], acc)
}

/// `-Σ p·ln(max(p, 1e-12))` of a probability row.
pub fn entropy_of(row: &[f64]) -> Result<f64> {
    let total: f64 = row.iter().sum();
    if row.is_empty() || (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
        return Err(Error::MalformedDistribution(total));
    }
    Ok(tape::entropy_unchecked(row))
}

/// Population variance across passes for each class.
pub fn class_variance<R: AsRef<[f64]>>(passes: &[R]) -> Result<Vec<f64>> {
    let first = passes.first().ok_or(Error::Empty("pass list"))?.as_ref();
    let c = first.len();
    if passes.iter().any(|p| p.as_ref().len() != c) {
        return Err(Error::shape("variance_of", "passes have different class counts"));
    }
    let t = passes.len() as f64;
    // Deviations from the first pass keep identical passes at exactly zero.
    let mut shift_sum = vec![0.0; c];
    let mut var = vec![0.0; c];
    for p in passes {
        for (((m, s), v), x0) in shift_sum.iter_mut().zip(var.iter_mut()).zip(p.as_ref()).zip(first) {
            let d = v - x0;
            *m += d;
            *s += d * d;
        }
    }
    for (s, m) in var.iter_mut().zip(&shift_sum) {
        *s -= m * m / t;
    }
    var.iter_mut().for_each(|s| *s = (*s / t).max(0.0));
    Ok(var)
}

/// Per-class population variance of raw outputs across `T` passes,
/// averaged over classes.
pub fn variance_of<R: AsRef<[f64]>>(passes: &[R]) -> Result<f64> {
    let var = class_variance(passes)?;
    Ok(var.iter().sum::<f64>() / var.len() as f64)
}

/// Divides raw entropy by `ln C` so thresholds mean the same thing for any
/// class count.
pub fn normalize_entropy(h: f64, classes: usize) -> f64 {
    if classes < 2 {
        0.0
    } else {
        h / (classes as f64).ln()
    }
}

/// Rescales to `[0, 1]` by the batch minimum and maximum; a constant batch
/// maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 0.0 {
        values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Per-sample adversarial-loss weights for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    pub weights: Vec<f64>,
    pub threshold: f64,
    pub survivor_count: usize,
}

impl AdaptiveWeights {
    pub fn survivor_fraction(&self) -> f64 {
        if self.weights.is_empty() {
            0.0
        } else {
            self.survivor_count as f64 / self.weights.len() as f64
        }
    }

    pub fn all_zero(&self) -> bool {
        self.survivor_count == 0
    }
}

/// Zero weight above the threshold; survivors get
/// `N_surv·e^{-u_i} / Σ_surv e^{-u_j}`, so surviving weights average to one.
pub fn adaptive_weights(uncertainties: &[f64], threshold: f64) -> AdaptiveWeights {
    let survives: Vec<bool> = uncertainties.iter().map(|&u| u <= threshold).collect();
    let survivor_count = survives.iter().filter(|&&s| s).count();
    // Shifting by the smallest survivor keeps the exponentials in range.
    let shift = uncertainties
        .iter()
        .zip(&survives)
        .filter(|(_, &s)| s)
        .map(|(&u, _)| u)
        .fold(f64::INFINITY, f64::min);
    let denom: f64 = uncertainties
        .iter()
        .zip(&survives)
        .filter(|(_, &s)| s)
        .map(|(&u, _)| (-(u - shift)).exp())
        .sum();
    let n = survivor_count as f64;
    let weights = uncertainties
        .iter()
        .zip(&survives)
        .map(|(&u, &s)| if s { n * (-(u - shift)).exp() / denom } else { 0.0 })
        .collect();
    AdaptiveWeights {
        weights,
        threshold,
        survivor_count,
    }
}

/// `T` stochastic forward passes through extractor and classifier with
/// `pass_index = 0..T`. A `classifier` override lets callers route the passes
/// through a frozen copy of the classifier.
pub fn mc_logits_on(
    tape: &mut Tape,
    bound: &BoundBundle,
    classifier: Option<&BoundNetwork>,
    x: Var,
    passes: usize,
    step: u64,
) -> Result<Vec<Var>> {
    if passes < 1 {
        return Err(Error::invalid("T", "need at least one Monte Carlo pass"));
    }
    let clf = classifier.unwrap_or(&bound.classifier);
    (0..passes as u64)
        .map(|t| {
            let key = bound.key(step, t);
            let f = bound.extract_features(tape, x, DropoutMode::McEval, key)?;
            clf.forward(tape, f, DropoutMode::McEval, key)
        })
        .collect()
}

/// Raw entropy of the pass-averaged tempered softmax, shape `[B]`.
pub fn entropy_uncertainty_on(tape: &mut Tape, logits: &[Var], tau: f64) -> Result<Var> {
    let probs = logits
        .iter()
        .map(|&l| tape.softmax_temp(l, tau))
        .collect::<Result<Vec<_>>>()?;
    let mean = tape.stack_mean(&probs)?;
    tape.row_entropy(mean)
}

/// Per-class logit variance `[B×C]` and its class mean `[B]`.
pub fn variance_uncertainty_on(tape: &mut Tape, logits: &[Var]) -> Result<(Var, Var)> {
    let per_class = tape.stack_variance(logits)?;
    let scalar = tape.row_mean(per_class)?;
    Ok((per_class, scalar))
}

/// Monte Carlo prediction for a batch. Dropout stays active in every pass.
pub fn mc_predict(bundle: &ModelBundle, x: &Tensor, passes: usize, tau: f64, step: u64) -> Result<McPrediction> {
    if passes < 1 {
        return Err(Error::invalid("T", "need at least one Monte Carlo pass"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("temperature must be positive, got {tau}")));
    }
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = mc_logits_on(&mut tape, &bound, None, xv, passes, step)?;
    let pass_logits: Vec<Tensor> = logits.iter().map(|&l| tape.value(l).clone()).collect();
    drop(tape);
    summarize(pass_logits, tau)
}

/// Builds every statistic of an [`McPrediction`] from raw per-pass logits.
pub fn summarize(pass_logits: Vec<Tensor>, tau: f64) -> Result<McPrediction> {
    let mean_probs = mean_tempered_probs(&pass_logits, tau)?;
    let (rows, classes) = (mean_probs.rows(), mean_probs.cols());
    let entropy_u: Vec<f64> = (0..rows).map(|r| tape::entropy_unchecked(mean_probs.row(r))).collect();
    let entropy_norm = entropy_u.iter().map(|&h| normalize_entropy(h, classes)).collect();
    let variance_u = (0..rows)
        .map(|r| {
            let per_pass: Vec<&[f64]> = pass_logits.iter().map(|l| l.row(r)).collect();
            variance_of(&per_pass)
        })
        .collect::<Result<_>>()?;
    Ok(McPrediction {
        passes: pass_logits.len(),
        pass_logits,
        mean_probs,
        entropy_u,
        entropy_norm,
        variance_u,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BundleSpec;

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy_of(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_of(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((entropy_of(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(entropy_of(&[0.5, 0.6]), Err(Error::MalformedDistribution(_))));
    }

    #[test]
    fn variance_closed_forms() {
        assert_eq!(variance_of(&[[1.0, 2.0], [1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(variance_of(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), 0.25);
        assert!(variance_of::<[f64; 2]>(&[]).is_err());
    }

    #[test]
    fn adaptive_weight_examples() {
        let w = adaptive_weights(&[0.1], 0.2);
        assert_eq!(w.weights, vec![1.0]);

        let w = adaptive_weights(&[0.1, 0.3], 0.2);
        assert_eq!(w.weights, vec![1.0, 0.0]);
        assert_eq!(w.survivor_count, 1);

        let w = adaptive_weights(&[0.1, 0.2], 0.2);
        let denom = (-0.1f64).exp() + (-0.2f64).exp();
        assert!((w.weights[0] - 2.0 * (-0.1f64).exp() / denom).abs() < 1e-12);
        assert!((w.weights[1] - 2.0 * (-0.2f64).exp() / denom).abs() < 1e-12);
        assert!((w.weights[0] - 1.04996).abs() < 1e-5);

        let w = adaptive_weights(&[0.5, 0.9], 0.2);
        assert!(w.all_zero());
        assert_eq!(w.weights, vec![0.0, 0.0]);
    }

    #[test]
    fn minmax_behaviour() {
        assert_eq!(minmax_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(minmax_normalize(&[4.0, 4.0]), vec![0.0, 0.0]);
    }

    fn bundle(p: f64) -> ModelBundle {
        let spec = BundleSpec::mlp(2, &[16, 8], 3, 1, &[4], p, false).unwrap();
        ModelBundle::new(spec, 3, 5).unwrap()
    }

    fn inputs() -> Tensor {
        let v: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        Tensor::matrix(10, 2, v).unwrap()
    }

    #[test]
    fn no_dropout_means_zero_variance() {
        let pred = mc_predict(&bundle(0.0), &inputs(), 6, 1.5, 0).unwrap();
        assert!(pred.variance_u.iter().all(|&v| v == 0.0));
        let single = mc_predict(&bundle(0.0), &inputs(), 1, 1.5, 0).unwrap();
        for (a, b) in pred.entropy_u.iter().zip(&single.entropy_u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pass_mean_is_softmax() {
        let pred = mc_predict(&bundle(0.5), &inputs(), 1, 2.0, 3).unwrap();
        for r in 0..10 {
            let expect = tape::softmax_row(pred.pass_logits[0].row(r), 2.0);
            for (a, b) in pred.mean_probs.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invariants_hold() {
        let pred = mc_predict(&bundle(0.5), &inputs(), 12, 1.5, 1).unwrap();
        for r in 0..10 {
            let s: f64 = pred.mean_probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(pred.entropy_u[r] >= 0.0 && pred.entropy_u[r] <= 3f64.ln() + 1e-12);
            assert!(pred.variance_u[r] >= 0.0);
        }
        assert!(pred.variance_u.iter().any(|&v| v > 0.0));
        assert!(mc_predict(&bundle(0.5), &inputs(), 0, 1.5, 1).is_err());
    }
}
