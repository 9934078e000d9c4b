//! Experiment configuration: a TOML file of flat `section.key` entries with
//! every default pre-filled, plus command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;
use udam_core::adaptation::{AdaptConfig, EvalMode, Mode};
use udam_core::data::ShiftSpec;
use udam_core::uncertainty::UncertaintyMetric;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Idx,
    Csv,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Idx => "idx",
            DatasetKind::Csv => "csv",
        }
    }

    pub fn is_synthetic(self) -> bool {
        matches!(self, DatasetKind::TwoMoons | DatasetKind::Blobs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_source: usize,
    pub n_target: usize,
    pub noise: f64,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Standardize with source statistics. Defaults to on for synthetic and
    /// CSV data, off for digits.
    pub standardize: bool,
    pub source_images: Option<PathBuf>,
    pub source_labels: Option<PathBuf>,
    pub target_images: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dims: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub dropout_p: f64,
    pub discriminator_dropout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub passes: usize,
    pub tau: f64,
    pub mode: EvalMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub shift: ShiftSpec,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub method: AdaptConfig,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Number of label classes implied by the dataset block.
    pub fn classes(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::TwoMoons => 2,
            DatasetKind::Idx => 10,
            _ => self.dataset.classes,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_str("", &[]).expect("defaults are valid")
    }
}

/// Every accepted key with its default, as TOML source. Keys absent here
/// are rejected.
pub const DEFAULTS: &str = r#"
dataset.kind = "two_moons"
dataset.n_source = "auto"
dataset.n_target = "auto"
dataset.noise = 0.1
dataset.classes = 2
dataset.dim = 2
dataset.separation = 4.0
dataset.standardize = "auto"
dataset.source_images = ""
dataset.source_labels = ""
dataset.target_images = ""
dataset.target_labels = ""
dataset.source_csv = ""
dataset.target_csv = ""
shift.rotation_deg = 0.0
shift.translation = []
shift.noise_sigma = 0.0
shift.dropped_classes = []
shift.extra_noise_classes = 0
shift.class_prior = []
model.feature_dims = [128, 64]
model.discriminator_hidden = [32]
model.dropout_p = 0.5
model.discriminator_dropout = false
train.epochs = 30
train.batch_size = 32
train.lr = 0.01
train.momentum = 0.9
train.weight_decay = 0.0005
train.seed = 0
method.mode = "uncertainty_full"
method.uncertainty_metric = "entropy"
method.mc_passes = 12
method.tau = 1.5
method.tau_c = 1.8
method.t_u = 0.2
method.gamma = -10.0
method.lambda_u_ratio = 0.25
method.discrepancy_q = 2
method.lambda_override = "none"
method.lu_generator_only = false
method.lu_detach_source = false
eval.passes = 12
eval.tau = 1.0
eval.mode = "mc"
output.dir = "runs/default"
"#;

type Flat = BTreeMap<String, Value>;

fn flatten(prefix: &str, table: toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<Flat, CliError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::config(origin, e.to_string().trim_end().to_string()))?;
    let mut flat = Flat::new();
    flatten("", table, &mut flat);
    Ok(flat)
}

/// Parses the right-hand side of a `--set key=value` flag. Bare words that
/// are not valid TOML values are taken as strings.
pub fn parse_override(arg: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::config(arg, "overrides take the form key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

struct Reader {
    values: Flat,
}

fn type_err(key: &str, want: &str, got: &Value) -> CliError {
    CliError::config(key, format!("expected {want}, got {}", got.type_str()))
}

impl Reader {
    fn get(&self, key: &str) -> &Value {
        &self.values[key]
    }

    fn f64(&self, key: &str) -> Result<f64, CliError> {
        match self.get(key) {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(type_err(key, "a number", other)),
        }
    }

    fn int(&self, key: &str) -> Result<i64, CliError> {
        match self.get(key) {
            Value::Integer(i) => Ok(*i),
            other => Err(type_err(key, "an integer", other)),
        }
    }

    fn usize(&self, key: &str) -> Result<usize, CliError> {
        let i = self.int(key)?;
        usize::try_from(i).map_err(|_| CliError::config(key, format!("must be non-negative, got {i}")))
    }

    fn count_or_auto(&self, key: &str, auto: usize) -> Result<usize, CliError> {
        match self.get(key) {
            Value::String(s) if s == "auto" => Ok(auto),
            _ => self.usize(key),
        }
    }

    fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            Value::Boolean(b) => Ok(*b),
            other => Err(type_err(key, "a boolean", other)),
        }
    }

    fn str(&self, key: &str) -> Result<&str, CliError> {
        match self.get(key) {
            Value::String(s) => Ok(s),
            other => Err(type_err(key, "a string", other)),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        let s = self.str(key)?;
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }

    fn array(&self, key: &str) -> Result<&[Value], CliError> {
        match self.get(key) {
            Value::Array(a) => Ok(a),
            other => Err(type_err(key, "an array", other)),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.array(key)?
            .iter()
            .map(|v| match v {
                Value::Float(f) => Ok(*f),
                Value::Integer(i) => Ok(*i as f64),
                other => Err(type_err(key, "an array of numbers", other)),
            })
            .collect()
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.array(key)?
            .iter()
            .map(|v| match v {
                Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                other => Err(type_err(key, "an array of non-negative integers", other)),
            })
            .collect()
    }

    fn parsed<T: std::str::FromStr<Err = udam_core::Error>>(&self, key: &str) -> Result<T, CliError> {
        self.str(key)?
            .parse()
            .map_err(|e: udam_core::Error| CliError::config(key, e.to_string()))
    }
}

/// Reads and validates a config file, then applies `overrides` in order.
pub fn parse_config(path: &Path, overrides: &[(String, Value)]) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(&path.display().to_string(), format!("cannot read config: {e}")))?;
    parse_str(&text, overrides)
}

pub fn parse_str(text: &str, overrides: &[(String, Value)]) -> Result<ExperimentConfig, CliError> {
    let mut values = parse_toml(DEFAULTS, "defaults")?;
    for (key, v) in parse_toml(text, "config")? {
        if !values.contains_key(&key) {
            return Err(CliError::config(&key, "unknown key"));
        }
        values.insert(key, v);
    }
    for (key, v) in overrides {
        match values.get(key) {
            None => return Err(CliError::config(key, "unknown key")),
            Some(old) => {
                log::info!("flag overrides {key}: {old} -> {v}");
            }
        }
        values.insert(key.clone(), v.clone());
    }
    build(&Reader { values })
}

fn check(ok: bool, key: &str, detail: impl Into<String>) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(key, detail))
    }
}

fn build(r: &Reader) -> Result<ExperimentConfig, CliError> {
    let kind = match r.str("dataset.kind")? {
        "two_moons" => DatasetKind::TwoMoons,
        "blobs" => DatasetKind::Blobs,
        "idx" => DatasetKind::Idx,
        "csv" => DatasetKind::Csv,
        other => {
            return Err(CliError::config(
                "dataset.kind",
                format!("unknown dataset `{other}` (expected two_moons, blobs, idx or csv)"),
            ))
        }
    };
    let standardize = match r.get("dataset.standardize") {
        Value::String(s) if s == "auto" => kind != DatasetKind::Idx,
        Value::Boolean(b) => *b,
        other => return Err(type_err("dataset.standardize", "a boolean or \"auto\"", other)),
    };
    let dataset = DatasetConfig {
        kind,
        n_source: r.count_or_auto("dataset.n_source", if kind == DatasetKind::Idx { 2000 } else { 400 })?,
        n_target: r.count_or_auto("dataset.n_target", if kind == DatasetKind::Idx { 1800 } else { 400 })?,
        noise: r.f64("dataset.noise")?,
        classes: r.usize("dataset.classes")?,
        dim: r.usize("dataset.dim")?,
        separation: r.f64("dataset.separation")?,
        standardize,
        source_images: r.path("dataset.source_images")?,
        source_labels: r.path("dataset.source_labels")?,
        target_images: r.path("dataset.target_images")?,
        target_labels: r.path("dataset.target_labels")?,
        source_csv: r.path("dataset.source_csv")?,
        target_csv: r.path("dataset.target_csv")?,
    };
    check(dataset.n_source >= 2, "dataset.n_source", "need at least 2 samples")?;
    check(dataset.n_target >= 2, "dataset.n_target", "need at least 2 samples")?;
    check(dataset.noise >= 0.0, "dataset.noise", "must be non-negative")?;
    check(dataset.classes >= 2, "dataset.classes", "need at least 2 classes")?;
    check(dataset.dim >= 1, "dataset.dim", "must be positive")?;
    check(dataset.separation > 0.0, "dataset.separation", "must be positive")?;
    match kind {
        DatasetKind::Idx => {
            for key in ["source_images", "source_labels", "target_images", "target_labels"] {
                let full = format!("dataset.{key}");
                check(r.path(&full)?.is_some(), &full, "required when dataset.kind = \"idx\"")?;
            }
        }
        DatasetKind::Csv => {
            for key in ["dataset.source_csv", "dataset.target_csv"] {
                check(r.path(key)?.is_some(), key, "required when dataset.kind = \"csv\"")?;
            }
        }
        _ => {}
    }

    let prior = r.f64_list("shift.class_prior")?;
    let shift = ShiftSpec {
        rotation_deg: r.f64("shift.rotation_deg")?,
        translation: r.f64_list("shift.translation")?,
        noise_sigma: r.f64("shift.noise_sigma")?,
        dropped_classes: r.usize_list("shift.dropped_classes")?,
        extra_noise_classes: r.usize("shift.extra_noise_classes")?,
        class_prior: (!prior.is_empty()).then_some(prior),
    };

    let model = ModelConfig {
        feature_dims: r.usize_list("model.feature_dims")?,
        discriminator_hidden: r.usize_list("model.discriminator_hidden")?,
        dropout_p: r.f64("model.dropout_p")?,
        discriminator_dropout: r.bool("model.discriminator_dropout")?,
    };
    check(!model.feature_dims.is_empty(), "model.feature_dims", "need at least one layer")?;
    check(model.feature_dims.iter().all(|&d| d > 0), "model.feature_dims", "widths must be positive")?;
    check(
        model.discriminator_hidden.iter().all(|&d| d > 0),
        "model.discriminator_hidden",
        "widths must be positive",
    )?;
    check((0.0..1.0).contains(&model.dropout_p), "model.dropout_p", "must lie in [0, 1)")?;

    let seed = r.int("train.seed")?;
    let train = TrainSettings {
        epochs: r.usize("train.epochs")?,
        batch_size: r.usize("train.batch_size")?,
        seed: u64::try_from(seed).map_err(|_| CliError::config("train.seed", "must be non-negative"))?,
    };
    check(train.epochs >= 1, "train.epochs", "must be at least 1")?;
    check(train.batch_size >= 1, "train.batch_size", "must be at least 1")?;

    let lambda_override = match r.get("method.lambda_override") {
        Value::String(s) if s == "none" => None,
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        other => return Err(type_err("method.lambda_override", "a number or \"none\"", other)),
    };
    let q = r.int("method.discrepancy_q")?;
    let method = AdaptConfig {
        mode: r.parsed::<Mode>("method.mode")?,
        metric: r.parsed::<UncertaintyMetric>("method.uncertainty_metric")?,
        mc_passes: r.usize("method.mc_passes")?,
        tau: r.f64("method.tau")?,
        tau_c: r.f64("method.tau_c")?,
        t_u: r.f64("method.t_u")?,
        gamma: r.f64("method.gamma")?,
        lambda_u_ratio: r.f64("method.lambda_u_ratio")?,
        discrepancy_q: u32::try_from(q).unwrap_or(0),
        lambda_override,
        lu_generator_only: r.bool("method.lu_generator_only")?,
        lu_detach_source: r.bool("method.lu_detach_source")?,
        learning_rate: r.f64("train.lr")?,
        momentum: r.f64("train.momentum")?,
        weight_decay: r.f64("train.weight_decay")?,
    };
    method.validate().map_err(|e| match e {
        udam_core::Error::InvalidArgument { name, detail } => CliError::config(&key_for(name), detail),
        other => CliError::config("method", other.to_string()),
    })?;

    let eval = EvalSettings {
        passes: r.usize("eval.passes")?,
        tau: r.f64("eval.tau")?,
        mode: match r.str("eval.mode")? {
            "mc" => EvalMode::Mc,
            "deterministic" => EvalMode::DeterministicExpectation,
            other => {
                return Err(CliError::config(
                    "eval.mode",
                    format!("unknown mode `{other}` (expected mc or deterministic)"),
                ))
            }
        },
    };
    check(eval.passes >= 1, "eval.passes", "must be at least 1")?;
    check(eval.tau > 0.0, "eval.tau", "must be positive")?;

    let cfg = ExperimentConfig {
        dataset,
        shift,
        model,
        train,
        method,
        eval,
        output_dir: PathBuf::from(r.str("output.dir")?),
    };
    let dim = match kind {
        DatasetKind::TwoMoons => 2,
        DatasetKind::Idx => udam_core::data::TARGET_SIDE * udam_core::data::TARGET_SIDE,
        _ => cfg.dataset.dim,
    };
    // CSV dimensions are only known after loading; the shift is checked again then.
    if kind != DatasetKind::Csv {
        cfg.shift.validate(cfg.classes(), dim).map_err(|e| shift_error(&e))?;
    }
    Ok(cfg)
}

/// Maps a core validation error onto the config key it concerns.
pub(crate) fn shift_error(e: &udam_core::Error) -> CliError {
    match e {
        udam_core::Error::InvalidArgument { name, detail } => CliError::config(&format!("shift.{name}"), detail.clone()),
        other => CliError::config("shift", other.to_string()),
    }
}

fn key_for(name: &str) -> String {
    match name {
        "learning_rate" => "train.lr".into(),
        "momentum" | "weight_decay" => format!("train.{name}"),
        other => format!("method.{other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_str("", &[]).unwrap();
        assert_eq!(c.method.mc_passes, 12);
        assert_eq!(c.method.tau, 1.5);
        assert_eq!(c.method.tau_c, 1.8);
        assert_eq!(c.method.t_u, 0.2);
        assert_eq!(c.model.dropout_p, 0.5);
        assert_eq!(c.method.gamma, -10.0);
        assert_eq!(c.method.lambda_u_ratio, 0.25);
        assert_eq!(c.method.discrepancy_q, 2);
        assert!(c.dataset.standardize);
    }

    #[test]
    fn constraint_errors_name_the_key() {
        let e = parse_str("method.t_u = -0.1", &[]).unwrap_err();
        assert!(e.to_string().contains("t_u"), "{e}");
        let e = parse_str("[model]\ndropout_p = 1.5", &[]).unwrap_err();
        assert!(e.to_string().contains("model.dropout_p"), "{e}");
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        let e = parse_str("method.tee_u = 0.1", &[]).unwrap_err();
        assert!(e.to_string().contains("method.tee_u"));
        let e = parse_str("train.epochs = \"ten\"", &[]).unwrap_err();
        assert!(e.to_string().contains("train.epochs"));
    }

    #[test]
    fn overrides_win() {
        let o = vec![
            parse_override("train.seed=7").unwrap(),
            parse_override("method.mode=source_only").unwrap(),
        ];
        let c = parse_str("train.seed = 3", &o).unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.method.mode, Mode::SourceOnly);
        assert!(parse_str("", &[parse_override("nope.key=1").unwrap()]).is_err());
    }

    #[test]
    fn idx_requires_paths() {
        let e = parse_str("dataset.kind = \"idx\"", &[]).unwrap_err();
        assert!(e.to_string().contains("dataset.source_images"));
    }
}
