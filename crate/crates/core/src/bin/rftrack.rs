use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rftrack::cli::{self, CliError, Overrides, RunConfig, Summary};
use rftrack::RMode;

#[derive(Parser)]
#[command(name = "rftrack", version, about = "RF localization, segment-wise EKF tracking and error evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip outlier removal before filtering.
    #[arg(long, global = true)]
    raw: bool,
    /// Worker threads for per-segment filtering.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Measurement-noise estimate: mean or mse.
    #[arg(long, global = true)]
    r_mode: Option<RMode>,
    /// Cleaning threshold in metres.
    #[arg(long, global = true)]
    threshold_m: Option<f64>,
    /// Timestamp alignment tolerance in milliseconds.
    #[arg(long, global = true)]
    tol_ms: Option<i64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a flight and its RF fixes.
    Simulate,
    /// Align, clean, filter per segment and report.
    Track {
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        rf: Option<PathBuf>,
        #[arg(long)]
        segments: Option<PathBuf>,
    },
    /// Error statistics of an estimate log against the truth.
    Evaluate {
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        segments: Option<PathBuf>,
    },
    /// Match truth and RF logs on timestamps.
    Align {
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        rf: Option<PathBuf>,
    },
    /// Drop aligned pairs above the threshold.
    Clean {
        #[arg(long)]
        input: PathBuf,
    },
    /// Project a geodetic log to local metres.
    Convert {
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Summary, CliError> {
    let c = cli.common;
    let mut ov = Overrides {
        out: c.out,
        seed: c.seed,
        raw: c.raw,
        parallel: c.parallel,
        r_mode: c.r_mode,
        threshold_m: c.threshold_m,
        tol_ms: c.tol_ms,
        ..Default::default()
    };
    match &cli.command {
        Command::Track { truth, rf, segments } => {
            ov.truth = truth.clone();
            ov.rf = rf.clone();
            ov.segments = segments.clone();
        }
        Command::Evaluate { truth, segments, .. } => {
            ov.truth = truth.clone();
            ov.segments = segments.clone();
        }
        Command::Align { truth, rf } => {
            ov.truth = truth.clone();
            ov.rf = rf.clone();
        }
        _ => {}
    }
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&ov);
    match &cli.command {
        Command::Simulate => cli::cmd_simulate(&cfg),
        Command::Track { .. } => {
            let summary = cli::cmd_track(&cfg)?;
            if let Some(text) = summary.details["report_text"].as_str() {
                print!("{text}");
            }
            Ok(summary)
        }
        Command::Evaluate { est, .. } => cli::cmd_evaluate(&cfg, est),
        Command::Align { .. } => cli::cmd_align(&cfg),
        Command::Clean { input } => cli::cmd_clean(&cfg, input),
        Command::Convert { input } => cli::cmd_convert(&cfg, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            if summary.warnings > 0 {
                eprintln!("{} warning(s); see summary.json", summary.warnings);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
