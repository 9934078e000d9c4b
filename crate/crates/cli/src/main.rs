use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use udam_cli::config::{parse_config, parse_override, parse_str, ExperimentConfig};
use udam_cli::experiment::{export_features, make_synthetic, run_eval, run_train, CHECKPOINT_FILE, METRICS_FILE};
use udam_cli::CliError;

#[derive(Parser)]
#[command(name = "udam", version, about = "Uncertainty-aware adversarial domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on both domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the metrics to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write extracted features and uncertainties of both domains as CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the source and target datasets of a synthetic config as CSV.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Config file; all defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set method.t_u=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set method.mode=MODE`.
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for `--set output.dir=DIR`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = self.seed {
            overrides.push(("train.seed".into(), toml::Value::Integer(s as i64)));
        }
        if let Some(e) = self.epochs {
            overrides.push(("train.epochs".into(), toml::Value::Integer(e as i64)));
        }
        if let Some(m) = &self.mode {
            overrides.push(("method.mode".into(), toml::Value::String(m.clone())));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(("output.dir".into(), toml::Value::String(d.display().to_string())));
        }
        match &self.config {
            Some(path) => parse_config(path, &overrides),
            None => parse_str("", &overrides),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let outcome = run_train(&cfg)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "epoch {}: source acc {:.4}, target acc {:.4}, mean u source {:.4}, target {:.4}",
                    last.epoch, last.source_acc, last.target_acc, last.source_mean_u, last.target_mean_u
                );
            }
            println!(
                "wrote {} and {}",
                cfg.output_dir.join(METRICS_FILE).display(),
                cfg.output_dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { common, checkpoint, csv } => {
            let cfg = common.load()?;
            let report = run_eval(&cfg, &checkpoint, csv.as_deref())?;
            for (name, m) in [("source", &report.source), ("target", &report.target)] {
                let per_class: Vec<String> = m
                    .per_class_accuracy
                    .iter()
                    .map(|a| a.map_or("-".to_string(), |v| format!("{v:.4}")))
                    .collect();
                println!(
                    "{name}: accuracy {:.4} over {} labeled, mean uncertainty {:.4}, per class [{}]",
                    m.accuracy,
                    m.labeled,
                    m.mean_uncertainty,
                    per_class.join(", ")
                );
            }
        }
        Command::ExportFeatures { common, checkpoint, out } => {
            let cfg = common.load()?;
            let rows = export_features(&cfg, &checkpoint, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::MakeSynthetic { common, out_dir } => {
            let cfg = common.load()?;
            let (s, t) = make_synthetic(&cfg, &out_dir)?;
            println!("wrote {} and {}", s.display(), t.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
