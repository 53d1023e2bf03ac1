//! `vidiff`: synthesize data, train the translator, translate, train and evaluate the
//! re-identification classifier, and emit figures, all inside one run directory.

mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vidiff", version, about = "Visible/infrared diffusion translation laboratory")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults to the run's `config.toml` if present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory name under the runs root (default: a timestamp).
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Override a config key, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Global seed; also replaces every section seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the single-modality labeled dataset and the held-out evaluation set.
    Synth {
        #[arg(long)]
        n_ids: Option<usize>,
        #[arg(long)]
        per_id: Option<usize>,
    },
    /// Train the conditional denoiser.
    TrainDiff {
        #[arg(long)]
        steps: Option<usize>,
        /// Dataset directory (`<root>/<modality>/<identity>/*.png`); read only.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Translate the labeled images into the other modality.
    Translate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Translate at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the re-identification classifier on real and translated images.
    TrainReid {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Loss on the translated stream: ce_only, gce, lsr or gce+lsr.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Cross-modality retrieval and classification on the evaluation set.
    Eval {
        /// Labeled evaluation directory with a `manifest.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Modality gap of condition images versus low-pass references.
    GapPlot,
    /// Loss-mode grid and condition-versus-partial-noise comparison.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only run the loss grid.
        #[arg(long)]
        skip_condition: bool,
        /// Images per direction in the condition comparison.
        #[arg(long, default_value_t = 32)]
        limit: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Synth { .. } => "synth",
            Self::TrainDiff { .. } => "train-diff",
            Self::Translate { .. } => "translate",
            Self::TrainReid { .. } => "train-reid",
            Self::Eval { .. } => "eval",
            Self::GapPlot => "gap-plot",
            Self::Ablate { .. } => "ablate",
        }
    }

    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        match self {
            Self::Synth { n_ids, per_id } => {
                push("data.n_ids", n_ids.map(|v| v.to_string()));
                push("data.per_id", per_id.map(|v| v.to_string()));
            }
            Self::TrainDiff { steps, .. } => push("train.steps", steps.map(|v| v.to_string())),
            Self::TrainReid { steps, loss, .. } => {
                push("reid.steps", steps.map(|v| v.to_string()));
                push("loss.mode", loss.as_ref().map(|v| format!("\"{v}\"")));
            }
            _ => {}
        }
        out
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let run = run::Run::open(&cli.global, cli.command.name(), cli.command.overrides())?;
    log::info!("run directory {}", run.dir.display());
    match cli.command {
        Command::Synth { .. } => commands::synth(&run),
        Command::TrainDiff { data, .. } => commands::train_diff(&run, data.as_deref()),
        Command::Translate { data, limit } => commands::translate(&run, data.as_deref(), limit),
        Command::TrainReid { data, .. } => commands::train_reid(&run, data.as_deref()),
        Command::Eval { data } => commands::eval(&run, data.as_deref()),
        Command::GapPlot => commands::gap_plot(&run),
        Command::Ablate {
            data,
            skip_condition,
            limit,
        } => commands::ablate(&run, data.as_deref(), skip_condition, limit),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
