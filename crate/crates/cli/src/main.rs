mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes shared by every subcommand.
pub mod exit {
    pub const OK: u8 = 0;
    pub const RUNTIME: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DEADLOCK: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(
    name = "pcm",
    version,
    about = "Context-aware task scheduling on an emulated opportunistic GPU cluster"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Wall seconds per emulated second (overrides config and PCM_TIME_SCALE).
    #[arg(long, global = true)]
    pub time_scale: Option<f64>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Directory every relative path is resolved against.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scheduler service (framed TCP for workers, HTTP control plane).
    Scheduler(commands::SchedulerArgs),
    /// Run one worker until the scheduler sends SHUTDOWN.
    Worker(commands::WorkerArgs),
    /// Serve the filesystem emulator and replay a trace against a scheduler.
    Factory(commands::FactoryArgs),
    /// Generate or inspect arrival/preemption traces.
    Trace {
        #[command(subcommand)]
        action: commands::TraceAction,
    },
    /// Run one experiment and write its metrics CSV.
    Run(commands::RunArgs),
    /// Register the default recipe and submit a workload to a running scheduler.
    Submit(commands::SubmitArgs),
    /// Print a running scheduler's status as JSON.
    Status(commands::StatusArgs),
    /// Send SHUTDOWN to every worker and stop a running scheduler.
    Stop(commands::StopArgs),
    /// Compare metrics CSVs: reductions, ranges and throughput regression.
    Summarize(commands::SummarizeArgs),
    /// Chart completed items over time as SVG.
    Plot(commands::PlotArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    let filter = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| filter.into()))
        .with_writer(std::io::stderr)
        .try_init();
    if let Some(dir) = &cli.global.workdir {
        if let Err(e) = std::env::set_current_dir(dir) {
            eprintln!("error: --workdir {}: {e}", dir.display());
            return ExitCode::from(exit::CONFIG);
        }
    }
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
