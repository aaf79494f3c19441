use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use batchmoe::ablation::AblationKind;
use batchmoe::config::{OutputFormat, RunConfig};
use batchmoe::harness::{cmd_ablate, cmd_analyze, cmd_costmodel, cmd_simulate, RunOutcome};

/// Batch-aware expert reduction experiments for MoE inference.
///
/// Log verbosity follows the BATCHMOE_LOG environment variable
/// (error, warn, info, debug, trace); the default is warn.
#[derive(Parser)]
#[command(name = "batchmoe", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides schedule.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Curve format; overrides output.format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured policy on the synthetic model and write a routing trace.
    Simulate,
    /// Calibrate the roofline model and write latency and speedup curves.
    Costmodel {
        /// Measurement table (batch_size, attn_ms, route_ms, mlp_ms); overrides cost.calibration.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Activation statistics and batch skew of a JSONL routing trace.
    Analyze {
        trace: PathBuf,
    },
    /// Run an ablation grid averaged over seeds.
    Ablate {
        /// rank-denial, layer-window, phase-split, confidence-threshold-sweep or retained-count; overrides ablation.kind.
        kind: Option<AblationKind>,
    },
}

fn run(cli: Cli) -> anyhow::Result<RunOutcome> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("{}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.schedule.seed = seed;
    }
    if let Some(f) = cli.format {
        config.output.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Jsonl => OutputFormat::Jsonl,
        };
    }
    let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let outcome = match cli.command {
        Command::Simulate => cmd_simulate(&config, &out)?,
        Command::Costmodel { calibration } => cmd_costmodel(&config, calibration.as_deref(), &out)?,
        Command::Analyze { trace } => {
            cmd_analyze(&config, &trace, &out).with_context(|| format!("{}", trace.display()))?
        }
        Command::Ablate { kind } => {
            if let Some(k) = kind {
                config.ablation.kind = k;
            }
            cmd_ablate(&config, config.ablation.kind, &out)?
        }
    };
    Ok(outcome)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BATCHMOE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            println!("outputs in {}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
