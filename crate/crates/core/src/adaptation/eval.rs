use crate::data::DomainDataset;
use crate::dropout::DropoutMode;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::tape::Tape;
use crate::uncertainty::{argmax, mc_predict, UncertaintyMetric};

/// Dropout step key reserved for evaluation so that repeated evaluations of
/// the same model draw the same masks.
pub const EVAL_STEP: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Predict from the pass-averaged probabilities.
    Mc,
    /// Predict from a single pass with dropout disabled.
    DeterministicExpectation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub passes: usize,
    pub mode: EvalMode,
    /// Temperature used for predictions.
    pub eval_tau: f64,
    /// Temperature used for the reported uncertainty.
    pub tau: f64,
    pub metric: UncertaintyMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            passes: 12,
            mode: EvalMode::Mc,
            eval_tau: 1.0,
            tau: 1.5,
            metric: UncertaintyMetric::Entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Over samples with a class label; noise points are excluded.
    pub accuracy: f64,
    pub mean_uncertainty: f64,
    /// `None` for classes absent from the dataset.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub labeled: usize,
}

pub fn evaluate(bundle: &ModelBundle, dataset: &DomainDataset, cfg: &EvalConfig) -> Result<EvalMetrics> {
    if dataset.classes != bundle.classes() {
        return Err(Error::shape(
            "evaluate",
            format!("dataset has {} classes, model has {}", dataset.classes, bundle.classes()),
        ));
    }
    if dataset.dim() != bundle.input_dim() {
        return Err(Error::shape(
            "evaluate",
            format!("dataset has {} features, model expects {}", dataset.dim(), bundle.input_dim()),
        ));
    }
    let mc = mc_predict(bundle, &dataset.features, cfg.passes, cfg.tau, EVAL_STEP)?;
    let u = mc.uncertainty(cfg.metric);
    let mean_uncertainty = u.iter().sum::<f64>() / u.len() as f64;

    let predictions = match cfg.mode {
        EvalMode::Mc => mc.predictions_at(cfg.eval_tau)?,
        EvalMode::DeterministicExpectation => {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let x = tape.constant(dataset.features.clone());
            let key = bound.key(EVAL_STEP, 0);
            let f = bound.extract_features(&mut tape, x, DropoutMode::Off, key)?;
            let logits = bound.classify(&mut tape, f, DropoutMode::Off, key)?;
            let lv = tape.value(logits);
            (0..lv.rows()).map(|r| argmax(lv.row(r))).collect()
        }
    };

    let classes = dataset.classes;
    let mut correct = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&label, &pred) in dataset.labels.iter().zip(&predictions) {
        if label < 0 {
            continue;
        }
        let c = label as usize;
        seen[c] += 1;
        if pred == c {
            correct[c] += 1;
        }
    }
    let labeled: usize = seen.iter().sum();
    if labeled == 0 {
        return Err(Error::Empty("labeled evaluation set"));
    }
    Ok(EvalMetrics {
        accuracy: correct.iter().sum::<usize>() as f64 / labeled as f64,
        mean_uncertainty,
        per_class_accuracy: correct
            .iter()
            .zip(&seen)
            .map(|(&k, &n)| (n > 0).then(|| k as f64 / n as f64))
            .collect(),
        labeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, DomainTag};
    use crate::models::BundleSpec;
    use crate::tensor::Tensor;

    #[test]
    fn untrained_net_is_near_chance() {
        let ds = gen_blobs(400, 4, 2, 3.0, 5).unwrap();
        let spec = BundleSpec::mlp(2, &[16], 4, 1, &[8], 0.5, false).unwrap();
        let bundle = ModelBundle::new(spec, 11, 12).unwrap();
        let m = evaluate(&bundle, &ds, &EvalConfig::default()).unwrap();
        assert!((m.accuracy - 0.25).abs() <= 0.1 + 0.15, "accuracy {}", m.accuracy);
        assert!((0.0..=1.0).contains(&m.mean_uncertainty));
        assert_eq!(m.labeled, 400);
    }

    #[test]
    fn repeated_evaluation_is_identical() {
        let ds = gen_blobs(60, 3, 2, 3.0, 5).unwrap();
        let spec = BundleSpec::mlp(2, &[16], 3, 1, &[8], 0.5, false).unwrap();
        let bundle = ModelBundle::new(spec, 1, 2).unwrap();
        let a = evaluate(&bundle, &ds, &EvalConfig::default()).unwrap();
        let b = evaluate(&bundle, &ds, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_points_do_not_count() {
        let features = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let ds = DomainDataset::new(features, vec![0, -1, 1], DomainTag::Target, 2).unwrap();
        let spec = BundleSpec::mlp(2, &[4], 2, 1, &[3], 0.5, false).unwrap();
        let bundle = ModelBundle::new(spec, 1, 2).unwrap();
        let m = evaluate(&bundle, &ds, &EvalConfig::default()).unwrap();
        assert_eq!(m.labeled, 2);
    }
}
