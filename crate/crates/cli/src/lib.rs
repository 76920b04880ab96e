//! Command-line runner: dataset generation, training, evaluation,
//! benchmarking, ensemble comparison and saliency export from one config
//! file.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use enecg::saliency::SaliencyTarget;
use enecg::task::Task;

use crate::commands::{Context, SaliencyArgs};
use crate::config::{RunConfig, SEED_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "enecg", version, about = "Frozen-expert ECG ensemble with LoRA heads and MoE gating")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "enecg-out")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Progress on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Gen,
    /// Train one model per task and repeat.
    Train,
    /// Evaluate trained models on their test splits.
    Eval {
        /// Directory of checkpoints written by `train` (default OUT/models).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Parameter counts and end-to-end throughput, parallel and sequential.
    Bench {
        #[arg(long, default_value_t = 64)]
        records: usize,
        #[arg(long, default_value_t = 5)]
        passes: usize,
    },
    /// Compare zero-shot, greedy, sample-aware and MoE weighting.
    CompareEnsembles,
    /// Integrated-gradients attribution for one record.
    Saliency {
        #[arg(long)]
        task: Option<Task>,
        /// Dataset index (default: first test record).
        #[arg(long)]
        record: Option<usize>,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// `combined` or `expert:I`.
        #[arg(long, default_value = "combined")]
        target: String,
        /// Output coordinate (class index for arrhythmia).
        #[arg(long, default_value_t = 0)]
        coord: usize,
        /// Checkpoint directory; trains a fresh model when omitted.
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

fn parse_target(s: &str, coord: usize) -> CliResult<SaliencyTarget> {
    if s == "combined" {
        return Ok(SaliencyTarget::Combined { coord });
    }
    s.strip_prefix("expert:")
        .and_then(|i| i.parse().ok())
        .map(|expert| SaliencyTarget::Expert { expert, coord })
        .ok_or_else(|| CliError::usage(format!("--target must be `combined` or `expert:I`, got `{s}`")))
}

/// Loads and resolves the configuration; nothing is written before this
/// succeeds.
pub fn load_config(global: &Global) -> CliResult<RunConfig> {
    let mut rc = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    rc.resolve_seed(global.seed, env.as_deref())?;
    rc.validate()?;
    Ok(rc)
}

fn execute(cli: Cli) -> CliResult<()> {
    let rc = load_config(&cli.global)?;
    let mut ctx = Context::new(rc, cli.global.out.clone(), cli.global.verbose)?;
    match cli.command {
        Command::Gen => commands::gen(&mut ctx),
        Command::Train => commands::train(&mut ctx),
        Command::Eval { models } => commands::eval(&mut ctx, models),
        Command::Bench { records, passes } => commands::bench_cmd(&mut ctx, records, passes),
        Command::CompareEnsembles => commands::compare(&mut ctx),
        Command::Saliency {
            task,
            record,
            steps,
            target,
            coord,
            models,
        } => {
            let target = parse_target(&target, coord)?;
            commands::saliency(
                &mut ctx,
                SaliencyArgs {
                    task,
                    record,
                    steps,
                    target,
                    models,
                },
            )
        }
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).line());
            let mut cmd = <Cli as clap::CommandFactory>::command();
            eprintln!("{}", cmd.render_help());
            return CliError::usage("").class.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.class.exit_code()
        }
    }
}
