mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use resprune::sandwich::{Ordering, ReplacementKind};
use resprune::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure (i/o, invalid model state)
  2  command-line usage error
  3  configuration validation failure (including infeasible budgets)
  4  missing artifact
  5  format version mismatch
  6  corrupted or unparsable artifact
  7  pipeline stage failure (fit, planning or training)

Artifacts live under the data directory: --data-dir, else paths.data_dir in
the config, else $RPRUNE_DATA_DIR, else ./data. Commands on disjoint data
directories may run concurrently; no file locking is done.";

#[derive(Debug, Parser)]
#[command(name = "resprune", version, about = "Prune residual branches of a toy transformer", after_help = EXIT_CODES)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base directory for all artifacts.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    Importance,
    Start2end,
    End2start,
}

impl From<OrderArg> for Ordering {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Importance => Ordering::Importance,
            OrderArg::Start2end => Ordering::Start2end,
            OrderArg::End2start => Ordering::End2start,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReplacementArg {
    Linear,
    Delete,
}

impl From<ReplacementArg> for ReplacementKind {
    fn from(r: ReplacementArg) -> Self {
        match r {
            ReplacementArg::Linear => ReplacementKind::Linear,
            ReplacementArg::Delete => ReplacementKind::Delete,
        }
    }
}

#[derive(Debug, clap::Args)]
struct PruneArgs {
    /// Fraction of blocks to prune, in [0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    /// Sandwich training after each replacement.
    #[arg(long, value_enum)]
    st: Option<OnOff>,
    #[arg(long, value_enum)]
    replacement: Option<ReplacementArg>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["1", "3", "5"]))]
    width: Option<String>,
    /// Pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest name under <data>/manifests, or a path.
    #[arg(long)]
    out: Option<String>,
    /// Continue from the partial manifest left by a failed run.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the untrained teacher from the model config.
    TeacherInit,
    /// Train the initialized teacher on the denoising task.
    TeacherTrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score every block by leave-one-out ablation.
    Score {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run the progressive pruning pipeline.
    Prune(PruneArgs),
    /// Build a low-ratio manifest from the components of a higher-ratio run.
    Transplant {
        /// Higher-ratio manifest supplying surrogates and adapters.
        #[arg(long)]
        from_high: String,
        /// Lower-ratio manifest defining the selection.
        #[arg(long)]
        low: String,
        #[arg(long)]
        out: Option<String>,
    },
    /// Quality proxies, FLOPs and latency of a manifest (or the teacher).
    Eval {
        #[arg(long)]
        manifest: Option<String>,
        /// Skip the latency benchmark.
        #[arg(long)]
        no_bench: bool,
    },
    /// Latency micro-benchmark of a manifest (or the teacher).
    Bench {
        #[arg(long)]
        manifest: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run the ablation matrix and the ratio sweep.
    Ablate {
        /// Comma-separated pipeline seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Render a stored report for humans.
    Report { path: PathBuf },
    /// Print the effective configuration.
    ShowConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Budget(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::Version { .. } => 5,
        Error::Corrupt(_) | Error::Size(_) | Error::Parse(_) => 6,
        Error::Stage { source, .. } => match **source {
            Error::Config(_) | Error::Budget(_) => 3,
            _ => 7,
        },
        Error::Fit { .. } | Error::Training { .. } | Error::Planning(_) => 7,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
