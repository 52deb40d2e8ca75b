//! `speckformer` command-line driver.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use speckformer::models::ModelVariant;
use speckformer::train::load_checkpoint;
use speckformer::Error;

use commands::SplitName;
use config::RunConfig;

/// Temperature regression from fiber specklegrams with transformer and
/// graph-attention models.
///
/// Settings come from a JSON run configuration (see `--print-defaults`);
/// flags override the file, which overrides the built-in defaults.
#[derive(Parser)]
#[command(name = "speckformer", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults, unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed override: the synthetic generator seed for `generate`/`preprocess`,
    /// the training and initialization seed for `train`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Print the complete default run configuration as JSON and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic specklegram dataset (PGM images and manifest.csv).
    Generate {
        /// Output directory [default: <output_dir>/dataset].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Temperature step in °C, overriding data.synthetic.t_step.
        #[arg(long, value_name = "C")]
        t_step: Option<f64>,
    },
    /// Apply the preprocessing pipeline and write the result as a dataset.
    Preprocess {
        /// Output directory [default: <output_dir>/preprocessed].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.spkf (best), last.spkf, history.csv,
    /// metrics.json (validation) and config.json into the output directory.
    Train {
        /// Output directory, overriding output_dir.
        #[arg(long, value_name = "DIR")]
        output_dir: Option<PathBuf>,
        /// Number of epochs, overriding train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Model variant, overriding model.variant (other model keys keep their values).
        #[arg(long)]
        variant: Option<ModelVariant>,
        /// Continue from this checkpoint (normally last.spkf); epochs are numbered on from it.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Print the metrics JSON of a checkpoint on one data split.
    Evaluate {
        /// Checkpoint to evaluate [default: <output_dir>/checkpoint.spkf].
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Data split to evaluate on.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Also write the JSON to this file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Render attention, saliency and importance maps for one image.
    Explain {
        /// Checkpoint to explain [default: <output_dir>/checkpoint.spkf].
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// PGM or PPM input, preprocessed like the training data
        /// [default: first test-split sample].
        #[arg(long, value_name = "PATH")]
        image: Option<PathBuf>,
        /// Output directory [default: <output_dir>/explain].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Exit code 2 for bad input or configuration, 1 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Corrupt(_)
        | Error::Version { .. }
        | Error::Range { .. }
        | Error::Dimension { .. }
        | Error::InsufficientData { .. } => 2,
        _ => 1,
    }
}

fn base_config(common: &Common) -> speckformer::Result<Option<RunConfig>> {
    common.config.as_deref().map(RunConfig::load).transpose()
}

/// Run configuration for commands that start from a checkpoint: an explicit
/// `--config` wins over the one stored in the checkpoint.
fn checkpoint_config(
    common: &Common,
    path: Option<PathBuf>,
) -> speckformer::Result<(RunConfig, speckformer::train::Checkpoint)> {
    let explicit = base_config(common)?;
    let path = path.unwrap_or_else(|| {
        explicit
            .clone()
            .unwrap_or_default()
            .output_dir
            .join(commands::BEST_CHECKPOINT)
    });
    let ckpt = load_checkpoint(&path)?;
    let cfg = match explicit {
        Some(c) => c,
        None => commands::config_of(&ckpt, &path)?,
    };
    Ok((cfg, ckpt))
}

fn print_json(s: &str, out: Option<&Path>) -> speckformer::Result<()> {
    println!("{s}");
    if let Some(p) = out {
        std::fs::write(p, format!("{s}\n")).map_err(|e| Error::Io {
            path: p.to_owned(),
            source: e,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> speckformer::Result<()> {
    let common = &cli.common;
    if common.print_defaults {
        println!("{}", RunConfig::default().to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given; see --help".into()));
    };
    match command {
        Command::Generate { out, t_step } => {
            let mut cfg = base_config(common)?.unwrap_or_default();
            if let Some(s) = common.seed {
                cfg.data.synthetic_seed = s;
            }
            if let Some(t) = t_step {
                cfg.data.synthetic.t_step = t;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            let n = commands::generate(&cfg, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Preprocess { out } => {
            let mut cfg = base_config(common)?.unwrap_or_default();
            if let Some(s) = common.seed {
                cfg.data.synthetic_seed = s;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("preprocessed"));
            let n = commands::preprocess_dataset(&cfg, &out)?;
            println!("wrote {n} preprocessed samples to {}", out.display());
        }
        Command::Train {
            output_dir,
            epochs,
            variant,
            resume,
        } => {
            let mut cfg = match (base_config(common)?, &resume) {
                (Some(c), _) => c,
                (None, Some(p)) => commands::config_of(&load_checkpoint(p)?, p)?,
                (None, None) => RunConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.model.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            let summary =
                commands::train(&cfg, resume.as_deref(), &mut |line| eprintln!("{line}"))?;
            println!(
                "trained through epoch {}; best epoch {} (val mae {:.4}); outputs in {}",
                summary.last_epoch,
                summary.best_epoch,
                summary.val.mae,
                cfg.output_dir.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            split,
            out,
        } => {
            let (cfg, ckpt) = checkpoint_config(common, checkpoint)?;
            let report = commands::evaluate_checkpoint(&cfg, &ckpt, split)?;
            print_json(&report.to_json(), out.as_deref())?;
        }
        Command::Explain {
            checkpoint,
            image,
            out,
        } => {
            let (cfg, ckpt) = checkpoint_config(common, checkpoint)?;
            if ckpt.config.variant == ModelVariant::Cnn {
                eprintln!(
                    "note: the cnn variant has no attention; writing saliency and overlay only"
                );
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.join("explain"));
            for p in commands::explain(&cfg, &ckpt, image.as_deref(), &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
