//! Command-line front end: `synth → prep → train → eval`, plus the tabular
//! `baseline` and `roc` export. Every subcommand reads one flat TOML config
//! (optional) and applies its flags on top.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbert_core::baseline::LearnerKind;
use mbert_core::model::Task;
use mbert_core::{Error, Result};

pub use commands::{cmd_baseline, cmd_eval, cmd_prep, cmd_roc, cmd_synth, cmd_train};
pub use config::{Profile, RunConfig};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mbert",
    version,
    about = "Length-of-stay prediction from admission event sequences"
)]
pub struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).ok_or_else(|| format!("unknown task '{s}' (expected binary, category or real)"))
}

#[derive(Debug, Args, Default)]
pub struct TaskArg {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LearnerArg {
    Logreg,
    Mlp,
    All,
}

impl LearnerArg {
    fn kinds(self) -> Vec<LearnerKind> {
        match self {
            LearnerArg::Logreg => vec![LearnerKind::Logreg],
            LearnerArg::Mlp => vec![LearnerKind::Mlp],
            LearnerArg::All => vec![LearnerKind::Logreg, LearnerKind::Mlp],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort and its reference ranges.
    Synth {
        /// Number of admissions.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        severity_effect: Option<f64>,
    },
    /// Split, window and tokenize the cohort.
    Prep,
    /// Train the sequence model.
    Train {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit and evaluate the tabular baselines.
    Baseline {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "all")]
        learner: LearnerArg,
    },
    /// Export the ROC curve of a model's binary predictions.
    Roc {
        /// mbert, logreg or mlp.
        #[arg(long, default_value = "mbert")]
        model: String,
    },
}

/// Config file (or defaults) with the command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    match &cli.command {
        Command::Synth { n, severity_effect } => {
            cfg.n_admissions = n.unwrap_or(cfg.n_admissions);
            cfg.severity_effect = severity_effect.unwrap_or(cfg.severity_effect);
        }
        Command::Prep | Command::Roc { .. } => {}
        Command::Train {
            task,
            profile,
            max_epochs,
            lr,
        } => {
            cfg.task = task.task.unwrap_or(cfg.task);
            cfg.profile = profile.unwrap_or(cfg.profile);
            cfg.max_epochs = max_epochs.or(cfg.max_epochs);
            cfg.lr = lr.or(cfg.lr);
        }
        Command::Eval { task, checkpoint } => {
            cfg.task = task.task.unwrap_or(cfg.task);
            cfg.checkpoint = checkpoint.clone().or(cfg.checkpoint);
        }
        Command::Baseline { task, .. } => {
            cfg.task = task.task.unwrap_or(cfg.task);
        }
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    log::debug!("config hash {}", cfg.hash());
    match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::Prep => cmd_prep(&cfg),
        Command::Train { .. } => cmd_train(&cfg).map(drop),
        Command::Eval { .. } => {
            let report = cmd_eval(&cfg)?;
            print!("{}", report.to_csv_string());
            Ok(())
        }
        Command::Baseline { learner, .. } => {
            let report = cmd_baseline(&cfg, &learner.kinds())?;
            print!("{}", report.to_csv_string());
            Ok(())
        }
        Command::Roc { model } => {
            let path = cmd_roc(&cfg, model)?;
            log::info!("wrote {}", path.display());
            Ok(())
        }
    }
}

/// 1 for bad input (config, flags, missing or malformed files), 2 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}
