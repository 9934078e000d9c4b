use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use udam_core::adaptation::{evaluate, EvalConfig, EvalMetrics, LossReport, Trainer, EVAL_STEP};
use udam_core::checkpoint::{check_compatible, read_checkpoint, write_checkpoint};
use udam_core::data::{
    apply_shift, gen_blobs, gen_two_moons, load_idx, read_csv, write_csv, BatchIter, DomainDataset, DomainTag,
    FeatureStats,
};
use udam_core::dropout::DropoutMode;
use udam_core::models::{BundleSpec, ModelBundle};
use udam_core::rng::{stream_seed, Stream};
use udam_core::tape::Tape;
use udam_core::uncertainty::mc_predict;

use crate::config::{shift_error, DatasetKind, ExperimentConfig};
use crate::error::{data_error, CliError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_HEADER: &str = "epoch,l_c,l_adv,l_u,lambda_adv,source_mean_u,target_mean_u,source_acc,target_acc,survivor_frac_s,survivor_frac_t";

#[derive(Debug, Clone)]
pub struct Domains {
    pub source: DomainDataset,
    pub target: DomainDataset,
}

/// Generates or loads both domains without standardization.
pub fn raw_domains(cfg: &ExperimentConfig) -> Result<Domains, CliError> {
    let d = &cfg.dataset;
    let root = cfg.train.seed;
    let data_seed = stream_seed(root, Stream::DataGen);
    let (source, base) = match d.kind {
        // The target starts from the same draw as the source, so an identity
        // shift reproduces the source exactly.
        DatasetKind::TwoMoons => (
            gen_two_moons(d.n_source, d.noise, data_seed),
            gen_two_moons(d.n_target, d.noise, data_seed),
        ),
        DatasetKind::Blobs => (
            gen_blobs(d.n_source, d.classes, d.dim, d.separation, data_seed),
            gen_blobs(d.n_target, d.classes, d.dim, d.separation, data_seed),
        ),
        DatasetKind::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated at parse time");
            (
                load_idx(&path(&d.source_images), &path(&d.source_labels), Some(d.n_source)),
                load_idx(&path(&d.target_images), &path(&d.target_labels), Some(d.n_target)),
            )
        }
        DatasetKind::Csv => {
            let read = |p: &Option<PathBuf>| -> udam_core::Result<DomainDataset> {
                let p = p.as_ref().expect("validated at parse time");
                read_csv(BufReader::new(File::open(p)?), d.classes)
            };
            (read(&d.source_csv), read(&d.target_csv))
        }
    };
    let source = source.map_err(|e| data_error("source dataset", e))?.with_domain(DomainTag::Source);
    let base = base.map_err(|e| data_error("target dataset", e))?.with_domain(DomainTag::Target);
    if base.dim() != source.dim() {
        return Err(CliError::Data(format!(
            "source has {} features, target has {}",
            source.dim(),
            base.dim()
        )));
    }
    cfg.shift.validate(source.classes, source.dim()).map_err(|e| shift_error(&e))?;
    let target = apply_shift(&base, &cfg.shift, stream_seed(root, Stream::Shift))
        .map_err(|e| data_error("target shift", e))?;
    Ok(Domains { source, target })
}

/// Domains as seen by the model: standardized with source statistics when
/// configured.
pub fn build_domains(cfg: &ExperimentConfig) -> Result<Domains, CliError> {
    let raw = raw_domains(cfg)?;
    if !cfg.dataset.standardize {
        return Ok(raw);
    }
    let stats = FeatureStats::of(&raw.source);
    Ok(Domains {
        source: stats.apply(&raw.source).map_err(|e| data_error("standardize", e))?,
        target: stats.apply(&raw.target).map_err(|e| data_error("standardize", e))?,
    })
}

pub fn bundle_spec(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<BundleSpec, CliError> {
    BundleSpec::mlp(
        input_dim,
        &cfg.model.feature_dims,
        classes,
        cfg.method.uncertainty_dim(classes),
        &cfg.model.discriminator_hidden,
        cfg.model.dropout_p,
        cfg.model.discriminator_dropout,
    )
    .map_err(|e| CliError::config("model", e.to_string()))
}

pub fn new_bundle(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<ModelBundle, CliError> {
    let spec = bundle_spec(cfg, input_dim, classes)?;
    let root = cfg.train.seed;
    Ok(ModelBundle::new(
        spec,
        stream_seed(root, Stream::Init),
        stream_seed(root, Stream::Dropout),
    )?)
}

pub fn eval_config(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig {
        passes: cfg.eval.passes,
        mode: cfg.eval.mode,
        eval_tau: cfg.eval.tau,
        tau: cfg.method.tau,
        metric: cfg.method.metric,
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Epoch means of the per-step losses.
    pub l_c: f64,
    pub l_adv: f64,
    pub l_u: f64,
    /// Value at the last step of the epoch.
    pub lambda_adv: f64,
    pub source_mean_u: f64,
    pub target_mean_u: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub survivor_frac_s: f64,
    pub survivor_frac_t: f64,
}

impl EpochRow {
    fn from_reports(epoch: usize, reports: &[LossReport], source: &EvalMetrics, target: &EvalMetrics) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            l_c: mean(|r| r.l_c),
            l_adv: mean(|r| r.l_adv),
            l_u: mean(|r| r.l_u),
            lambda_adv: reports.last().map_or(0.0, |r| r.lambda_adv),
            source_mean_u: source.mean_uncertainty,
            target_mean_u: target.mean_uncertainty,
            source_acc: source.accuracy,
            target_acc: target.accuracy,
            survivor_frac_s: mean(|r| r.survivor_frac_s),
            survivor_frac_t: mean(|r| r.survivor_frac_t),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l_c,
            self.l_adv,
            self.l_u,
            self.lambda_adv,
            self.source_mean_u,
            self.target_mean_u,
            self.source_acc,
            self.target_acc,
            self.survivor_frac_s,
            self.survivor_frac_t
        )
    }

    pub fn parse(line: &str) -> Result<Self, CliError> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(CliError::Data(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| CliError::Data(format!("metrics field {i}: {e}")))
        };
        Ok(Self {
            epoch: f[0].parse().map_err(|e| CliError::Data(format!("metrics epoch: {e}")))?,
            l_c: num(1)?,
            l_adv: num(2)?,
            l_u: num(3)?,
            lambda_adv: num(4)?,
            source_mean_u: num(5)?,
            target_mean_u: num(6)?,
            source_acc: num(7)?,
            target_acc: num(8)?,
            survivor_frac_s: num(9)?,
            survivor_frac_t: num(10)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::Data(format!("{} does not start with the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochRow::parse).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub rows: Vec<EpochRow>,
    pub steps: u64,
}

/// Trains in memory; no files are written.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    let domains = build_domains(cfg)?;
    train_on(cfg, &domains)
}

pub fn train_on(cfg: &ExperimentConfig, domains: &Domains) -> Result<TrainOutcome, CliError> {
    let (s, t) = (&domains.source, &domains.target);
    let bundle = new_bundle(cfg, s.dim(), s.classes)?;
    let shuffle_seed = stream_seed(cfg.train.seed, Stream::Shuffle);
    let per_epoch = BatchIter::new(s, t, cfg.train.batch_size, shuffle_seed, 0)
        .map_err(|e| CliError::config("train.batch_size", e.to_string()))?
        .steps_per_epoch();
    let total = (per_epoch * cfg.train.epochs) as u64;
    let mut trainer = Trainer::new(bundle, cfg.method.clone(), total)?;
    let ecfg = eval_config(cfg);
    let mut rows = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let reports = trainer.run_epoch(s, t, cfg.train.batch_size, shuffle_seed, epoch as u64)?;
        let steps = trainer.steps_done();
        let src = evaluate(trainer.bundle(), s, &ecfg).map_err(|e| after_epoch(epoch + 1, steps, e))?;
        let tgt = evaluate(trainer.bundle(), t, &ecfg).map_err(|e| after_epoch(epoch + 1, steps, e))?;
        let row = EpochRow::from_reports(epoch + 1, &reports, &src, &tgt);
        log::info!(
            "epoch {}: l_c {:.4} l_adv {:.4} l_u {:.5} source acc {:.3} target acc {:.3} u_s {:.3} u_t {:.3}",
            row.epoch,
            row.l_c,
            row.l_adv,
            row.l_u,
            row.source_acc,
            row.target_acc,
            row.source_mean_u,
            row.target_mean_u
        );
        rows.push(row);
    }
    let steps = trainer.steps_done();
    Ok(TrainOutcome {
        bundle: trainer.into_bundle(),
        rows,
        steps,
    })
}

/// Parameters can overflow without the loss itself going non-finite; the
/// evaluation that trips over them still reports where training stood.
fn after_epoch(epoch: usize, steps: u64, e: udam_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Numeric(m) => CliError::Numeric(format!("evaluation after epoch {epoch} (step {steps}): {m}")),
        other => other,
    }
}

pub fn write_metrics(path: &Path, rows: &[EpochRow]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and writes the metrics CSV and final checkpoint under
/// `cfg.output_dir`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    let outcome = train(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_metrics(&cfg.output_dir.join(METRICS_FILE), &outcome.rows)?;
    let mut w = BufWriter::new(File::create(cfg.output_dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(&mut w, &outcome.bundle, outcome.steps)?;
    w.flush()?;
    Ok(outcome)
}

/// Loads a checkpoint and checks it against the network the config and
/// data describe.
pub fn load_model(cfg: &ExperimentConfig, path: &Path, domains: &Domains) -> Result<ModelBundle, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let ckpt = read_checkpoint(BufReader::new(file)).map_err(|e| data_error("checkpoint", e))?;
    let expected = bundle_spec(cfg, domains.source.dim(), domains.source.classes)?;
    check_compatible(&expected, &ckpt.bundle.spec())?;
    Ok(ckpt.bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub source: EvalMetrics,
    pub target: EvalMetrics,
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let domains = build_domains(cfg)?;
    let bundle = load_model(cfg, checkpoint, &domains)?;
    let ecfg = eval_config(cfg);
    let report = EvalReport {
        source: evaluate(&bundle, &domains.source, &ecfg)?,
        target: evaluate(&bundle, &domains.target, &ecfg)?,
    };
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path)?);
        let classes = domains.source.classes;
        let per_class: Vec<String> = (0..classes).map(|c| format!("acc_class_{c}")).collect();
        writeln!(w, "domain,accuracy,mean_uncertainty,labeled,{}", per_class.join(","))?;
        for (tag, m) in [("source", &report.source), ("target", &report.target)] {
            let pcs: Vec<String> = m
                .per_class_accuracy
                .iter()
                .map(|a| a.map_or(String::new(), |v| v.to_string()))
                .collect();
            writeln!(w, "{tag},{},{},{},{}", m.accuracy, m.mean_uncertainty, m.labeled, pcs.join(","))?;
        }
        w.flush()?;
    }
    Ok(report)
}

/// Writes deterministic (dropout-off) features of both domains with labels
/// and the Monte Carlo uncertainty of each sample. Returns the row count.
pub fn export_features(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<usize, CliError> {
    let domains = build_domains(cfg)?;
    let bundle = load_model(cfg, checkpoint, &domains)?;
    let mut w = BufWriter::new(File::create(out)?);
    let k = bundle.feature_dim();
    let mut header: Vec<String> = (0..k).map(|j| format!("f{j}")).collect();
    header.extend(["label", "domain", "uncertainty"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    let mut rows = 0;
    for ds in [&domains.source, &domains.target] {
        let feats = deterministic_features(&bundle, ds)?;
        let mc = mc_predict(&bundle, &ds.features, cfg.eval.passes, cfg.method.tau, EVAL_STEP)?;
        let u = mc.uncertainty(cfg.method.metric);
        for r in 0..ds.len() {
            let mut fields: Vec<String> = feats.row(r).iter().map(|v| v.to_string()).collect();
            fields.push(ds.labels[r].to_string());
            fields.push(ds.domain.to_string());
            fields.push(u[r].to_string());
            writeln!(w, "{}", fields.join(","))?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn deterministic_features(
    bundle: &ModelBundle,
    ds: &DomainDataset,
) -> Result<udam_core::tensor::Tensor, CliError> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let x = tape.constant(ds.features.clone());
    let f = bound.extract_features(&mut tape, x, DropoutMode::Off, bound.key(EVAL_STEP, 0))?;
    Ok(tape.value(f).detached())
}

/// Writes `source.csv` and `target.csv` for a synthetic dataset config.
pub fn make_synthetic(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    if !cfg.dataset.kind.is_synthetic() {
        return Err(CliError::config(
            "dataset.kind",
            format!("make-synthetic needs two_moons or blobs, got {}", cfg.dataset.kind.as_str()),
        ));
    }
    let domains = raw_domains(cfg)?;
    fs::create_dir_all(out_dir)?;
    let paths = (out_dir.join("source.csv"), out_dir.join("target.csv"));
    for (path, ds) in [(&paths.0, &domains.source), (&paths.1, &domains.target)] {
        let mut w = BufWriter::new(File::create(path)?);
        write_csv(&mut w, &[ds])?;
        w.flush()?;
    }
    Ok(paths)
}
