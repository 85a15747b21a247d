//! Command-line entry points: generate data, select sensors, train,
//! evaluate, and forecast.

mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use stps::dataio::SelectionMode;
use stps::pipeline::Ablation;

use crate::config::{RunConfig, SplitName, SynthSpec};
use crate::error::{CliError, EXIT_OK, EXIT_USAGE};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "stps", version, about = "Partial-sensing long-term traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset and road graph.
    Synth,
    /// Choose the unsensed locations and write a partition file.
    Select,
    /// Train a model and write a checkpoint and loss log.
    Train,
    /// Score a checkpoint on one split and write metric reports.
    Evaluate,
    /// Forecast the unsensed locations from the latest sensed intervals.
    Forecast,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Select => "select",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Forecast => "forecast",
        }
    }
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Traffic CSV (`timestamp,loc_0,...`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Edge list CSV (`i,j` per line).
    #[arg(long, global = true)]
    adjacency: Option<PathBuf>,
    /// Generated dataset instead of files, e.g. `n=12 days=4 closure_rate=0`.
    #[arg(long, global = true, num_args = 1.., value_name = "KEY=VALUE")]
    synthetic: Option<Vec<String>>,
    /// Partition file; overrides --m-prime/--select.
    #[arg(long, global = true)]
    partition: Option<PathBuf>,
    /// Sensor selection mode: random or weighted.
    #[arg(long, global = true)]
    select: Option<SelectionMode>,
    /// Number of unsensed locations.
    #[arg(long, global = true)]
    m_prime: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint path (default: <out>/checkpoint.stps).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Model variant: none, one-step, two-step, plain-transfer, no-transfer, no-rank.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// Variance of Gaussian noise added to the training split.
    #[arg(long, global = true)]
    noise_variance: Option<f64>,
    /// Maximum epochs per stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    l: Option<usize>,
    #[arg(long, global = true)]
    l_prime: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    /// Stride between training windows.
    #[arg(long, global = true)]
    window_stride: Option<usize>,
    /// Split scored by evaluate: train, val, or test.
    #[arg(long, global = true)]
    split: Option<SplitName>,
    /// Write a per-bin comparison against the nearest-sensor baseline.
    #[arg(long, global = true)]
    bins: Option<usize>,
}

impl Flags {
    fn apply(self, mut c: RunConfig) -> Result<RunConfig, CliError> {
        macro_rules! set {
            ($flag:expr => $($target:tt)+) => {
                if let Some(v) = $flag {
                    $($target)+ = v;
                }
            };
        }
        if let Some(tokens) = &self.synthetic {
            c.synthetic = Some(SynthSpec::parse_tokens(tokens)?);
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
            c.model.seed = seed;
        }
        set!(self.data.map(Some) => c.data);
        set!(self.adjacency.map(Some) => c.adjacency);
        set!(self.partition.map(Some) => c.partition);
        set!(self.select => c.select);
        set!(self.m_prime.map(Some) => c.m_prime);
        set!(self.out => c.out);
        set!(self.checkpoint.map(Some) => c.checkpoint);
        set!(self.noise_variance => c.noise_variance);
        set!(self.split => c.split);
        set!(self.bins.map(Some) => c.bins);
        set!(self.ablation => c.model.ablation);
        set!(self.epochs => c.model.epochs_per_stage);
        set!(self.patience => c.model.patience);
        set!(self.alpha => c.model.alpha);
        set!(self.d => c.model.d);
        set!(self.l => c.model.l);
        set!(self.l_prime => c.model.l_prime);
        set!(self.batch => c.model.batch);
        set!(self.lr => c.model.lr);
        set!(self.weight_decay => c.model.weight_decay);
        set!(self.dropout => c.model.dropout);
        set!(self.window_stride => c.model.window_stride);
        c.resolve()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let base = match &cli.flags.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    let command = cli.command;
    let cfg = cli.flags.apply(base)?;
    log::debug!("{} config: {cfg:?}", command.name());
    match command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Select => commands::cmd_select(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Evaluate => commands::cmd_evaluate(&cfg),
        Command::Forecast => commands::cmd_forecast(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STPS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(EXIT_OK),
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
