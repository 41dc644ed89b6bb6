//! ncdlab: generate synthetic datasets, train and evaluate the
//! distribution-learning objective, run the ablation grid, gradient-check
//! every loss, and plot run artifacts.
//!
//! Exit codes: 0 success, 2 config/input error, 3 numerical failure.

mod ablate;
mod gradcheck;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ncdlab_core::config::ExperimentConfig;
use ncdlab_core::error::Error;
use ncdlab_core::losses::history_csv;
use ncdlab_core::{eval, synthgen, trainer};

#[derive(Parser)]
#[command(name = "ncdlab", version, about = "Novel categories discovery laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV from a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV file path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and evaluate it on a fresh test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (checkpoint.txt, history.csv, eval.*, ...).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the ablation grid over the requested axes, 3 seeds per cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for grid.csv.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of
        /// loss-components,distribution,augmentation,split,model.
        #[arg(long)]
        axes: Option<String>,
        /// Parallel cell workers.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gradient-check every loss component and the composite.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a history or grid CSV as an SVG chart.
    Plot {
        /// Input CSV (loss history or ablation grid).
        input: PathBuf,
        /// Output SVG file path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

pub fn log_level() -> LogLevel {
    match std::env::var("NCDLAB_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let config = ExperimentConfig::from_path(path)?;
    Ok(match seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let spec = config.multinoulli_spec()?;
            let dataset = synthgen::generate(
                config.data.dim,
                &spec,
                config.data.n_labeled,
                config.data.n_unlabeled,
                config.data.separation,
                config.data.scale,
                trainer::stream_seed(config.train.seed, 0),
            )?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, dataset.to_csv())?;
            if log_level() >= LogLevel::Info {
                println!(
                    "wrote {} ({} labeled + {} unlabeled instances)",
                    out.display(),
                    dataset.labeled_len(),
                    dataset.unlabeled_len()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, out, seed } => {
            let config = load_config(&config, seed)?;
            cmd_train(&config, &out)
        }
        Command::Ablate {
            config,
            out,
            axes,
            workers,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let axes = ablate::parse_axes(axes.as_deref())?;
            ablate::cmd_ablate(&config, &axes, workers.max(1), &out)
        }
        Command::Gradcheck { config, seed } => {
            let config = load_config(&config, seed)?;
            gradcheck::cmd_gradcheck(&config)
        }
        Command::Plot { input, out } => plot::cmd_plot(&input, &out),
    }
}

fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<ExitCode, Error> {
    std::fs::create_dir_all(out)?;
    let level = log_level();
    let mut progress = |line: &str| {
        if level >= LogLevel::Info {
            println!("{line}");
        }
    };
    let (outcome, report) = trainer::run_experiment_with_progress(config, &mut progress)?;

    std::fs::write(out.join("checkpoint.txt"), outcome.model.to_checkpoint())?;
    std::fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    std::fs::write(out.join("eval.csv"), report.to_csv())?;
    std::fs::write(out.join("eval.txt"), report.to_text())?;
    std::fs::write(out.join("confusion.csv"), report.confusion_csv())?;
    std::fs::write(
        out.join("embeddings.csv"),
        eval::dump_embeddings(&outcome.model, &outcome.dataset)?,
    )?;

    if level >= LogLevel::Info {
        print!("{}", report.to_text());
    }
    if level >= LogLevel::Debug {
        print!("{}", report.confusion_csv());
    }
    Ok(ExitCode::SUCCESS)
}
