//! `ltsv`: value time series blocks, compare against oracles and run the
//! selection experiments.
//!
//! Failures print one `error class=... kind=... detail=...` line on stderr
//! and exit with 1 (configuration), 2 (data) or 3 (numerical).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ltsv_core::{Error, ErrorClass};

use crate::config::{single_line, RunConfig};

pub const TOOL: &str = "ltsv";
pub const OUT_DIR_ENV: &str = "LTSV_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "ltsv-out";

#[derive(Debug, Parser)]
#[command(name = "ltsv", version, about = "Time series data valuation by one-step in-context finetuning")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory [default: config `output_dir`, then $LTSV_OUT_DIR, then ./ltsv-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// CSV dataset; replaces the configured data source.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic series in the ingestion format.
    Synth(SynthArgs),
    /// Score blocks, points and samples of the target split.
    Value,
    /// Score a small block set with LTSV and the configured oracles.
    OracleCompare,
    /// Select samples with each strategy, finetune and evaluate.
    SelectEval,
    /// Selection results across block lengths.
    Ablate,
    /// Wall-clock scaling of LTSV and exact influence.
    Bench,
    /// Value with one model, finetune another on the selections.
    Generalize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// sine_mix, ar_process or trend_season.
    #[arg(long)]
    generator: Option<String>,
    /// Number of time steps.
    #[arg(long)]
    length: Option<usize>,
    /// Number of channels.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Output file [default: <out>/synthetic.csv].
    #[arg(long)]
    output: Option<PathBuf>,
}

/// A classified failure ready for the one-line report.
#[derive(Debug)]
pub struct Failure {
    pub class: ErrorClass,
    pub kind: String,
    pub detail: String,
}

impl Failure {
    pub fn config(detail: impl Into<String>) -> Self {
        Self { class: ErrorClass::Config, kind: "InvalidConfig".into(), detail: detail.into() }
    }

    /// Prefixes the detail with the stage that failed.
    pub fn within(mut self, stage: &str) -> Self {
        self.detail = format!("{stage}: {}", self.detail);
        self
    }

    fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Config => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }

    fn line(&self) -> String {
        let class = match self.class {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        };
        format!("error class={class} kind={} detail={}", self.kind, single_line(&self.detail))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let debug = format!("{e:?}");
        let kind: String = debug.chars().take_while(|c| c.is_alphanumeric()).collect();
        Self { class: e.class(), kind, detail: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Settings shared by every subcommand after flags and config are merged.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

fn context(cli: &Cli) -> CliResult<Context> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(path) = &cli.data {
        let data = config.data.get_or_insert_with(Default::default);
        data.path = Some(path.clone());
        data.synthetic = None;
    }
    let workers = cli.workers.or(config.workers).unwrap_or(1);
    if workers == 0 {
        return Err(Failure::config("workers must be at least 1"));
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(Context { config, out, workers })
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = context(&cli)?;
    match &cli.command {
        Command::Synth(args) => commands::synth(&ctx, args, cli.seed),
        Command::Value => commands::value(&ctx),
        Command::OracleCompare => commands::oracle_compare(&ctx),
        Command::SelectEval => commands::select_eval(&ctx),
        Command::Ablate => commands::ablate(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Generalize => commands::generalize(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code())
        }
    }
}
