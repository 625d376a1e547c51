mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spil::local_spil::PositionVariant;
use spil::model::InitialFeatures;

use crate::config::{parse_overrides, Preset, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "spil", version, about = "Skeleton point interaction learning for violence recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a balanced synthetic pose data set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences, split evenly between the two classes.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert pose sequences into skeleton point clouds.
    Convert {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying part constants and the confidence threshold.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a network; writes config.json, metrics.jsonl, timing.json and
    /// checkpoint/ into --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints the accuracy and writes report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json; defaults to the checkpoint's parent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run config for ingest; defaults to the config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Dump the top-weighted neighbors of every centroid of one stage.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stage index.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Neighbors kept per centroid, highest weight first.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Output file; defaults to weights.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run config for ingest; defaults to the config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train once per position variant and tabulate the results.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated position variants; each run goes to <out>/<variant>.
        #[arg(long, value_delimiter = ',', default_value = "spacing,spanning,masking")]
        variants: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// Training data: pose sequences or point clouds, one JSON object per line.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out data evaluated after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Seed for initialization, sampling, augmentation and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Position relation: spacing, spanning or masking.
    #[arg(long)]
    variant: Option<String>,
    /// Heads per local layer; each stage keeps its output width.
    #[arg(long)]
    heads: Option<usize>,
    /// Same-frame masking distance in normalized image units.
    #[arg(long)]
    mask_d: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads; defaults to one per core. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Per-point input features: confidence, parts or both.
    #[arg(long)]
    initial_features: Option<String>,
    /// Further `--dotted.key value` overrides, e.g. `--train.learning_rate 0.01`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let overrides = parse_overrides(&self.overrides)?;
        let mut cfg = RunConfig::resolve(self.preset, self.config.as_deref(), &overrides)?;
        if let Some(p) = &self.data {
            cfg.data.train = Some(p.clone());
        }
        if let Some(p) = &self.val {
            cfg.data.val = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(v) = &self.variant {
            cfg.network.set_variant(v.parse::<PositionVariant>()?);
        }
        if let Some(h) = self.heads {
            cfg.network.set_heads(h)?;
        }
        if let Some(d) = self.mask_d {
            cfg.network.set_mask_d(d);
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(f) = &self.initial_features {
            cfg.network.set_initial_features(f.parse::<InitialFeatures>()?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { out, n, seed } => {
            commands::synth(&out, n, seed)?;
            println!("wrote {n} sequences to {}", out.display());
        }
        Command::Convert { data, out, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let n = commands::convert(&cfg, &data, &out)?;
            println!("wrote {n} point clouds to {}", out.display());
        }
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            set_threads(cfg.threads)?;
            let history = commands::run_train(&cfg, &out)?;
            if let Some(m) = history.last() {
                println!("final train_loss {:.4} train_acc {:.4}", m.train_loss, m.train_acc);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            threads,
        } => {
            set_threads(threads)?;
            let cfg = commands::eval_config(&checkpoint, config.as_deref())?;
            let out = out.unwrap_or_else(|| commands::default_report_dir(&checkpoint));
            let acc = commands::run_eval(&checkpoint, &data, &cfg, &out)?;
            println!("accuracy {acc:.4}");
        }
        Command::Inspect {
            checkpoint,
            data,
            layer,
            top_k,
            out,
            config,
        } => {
            let cfg = commands::eval_config(&checkpoint, config.as_deref())?;
            let out = out.unwrap_or_else(|| commands::default_report_dir(&checkpoint).join(commands::WEIGHTS_FILE));
            commands::run_inspect(&checkpoint, &data, &cfg, layer, top_k, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate { run, out, variants } => {
            let cfg = run.resolve()?;
            set_threads(cfg.threads)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<PositionVariant>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = commands::run_ablate(&cfg, &variants, &out)?;
            println!("{:<10} {:>10} {:>10} {:>10}", "variant", "loss", "train_acc", "val_acc");
            for r in rows {
                let val = r.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<10} {:>10.4} {:>10.4} {:>10}",
                    format!("{:?}", r.variant).to_lowercase(),
                    r.final_train_loss,
                    r.train_accuracy,
                    val
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
