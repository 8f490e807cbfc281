use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

mod commands;
mod serve;
mod worker;

#[derive(Parser)]
#[command(name = "cvr", version, about = "Continuous vulnerability repair: dedup, orchestration, simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordinator HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Claim tasks from a coordinator and repair them with the configured agents.
    Work {
        #[arg(long)]
        config: PathBuf,
        /// Coordinator base URL.
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        /// Exit after this many tasks (default: run until interrupted).
        #[arg(long)]
        max_tasks: Option<usize>,
        /// Seconds to wait between empty claims.
        #[arg(long, default_value_t = 2)]
        poll_secs: u64,
    },
    /// Simulate a scenario and write metrics, per-task CSV and the event log.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = commands::parse_strategy)]
        strategy: Option<cvr_core::orchestrator::Strategy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several strategies over a range of seeds.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated strategies.
        #[arg(long, default_value = "seq,fp2,par")]
        strategies: String,
        /// Seed range `a..b` (inclusive) or comma-separated list.
        #[arg(long, default_value = "1..30")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild coordinator state from an event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Write the reconstructed state as JSON.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Check the state rebuilt from a log for dedup invariant violations.
    Check {
        #[arg(long)]
        log: PathBuf,
        /// Resolution matrix to probe with (written by `simulate`).
        #[arg(long, conflicts_with = "config")]
        matrix: Option<PathBuf>,
        /// Probe with the validation backend of this service config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the lane plan for a config.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config } => serve::run(&config),
        Command::Work {
            config,
            server,
            max_tasks,
            poll_secs,
        } => worker::run(&config, &server, max_tasks, poll_secs),
        Command::Simulate {
            scenario,
            strategy,
            seed,
            out,
        } => commands::simulate(&scenario, strategy, seed, &out),
        Command::Sweep {
            scenario,
            strategies,
            seeds,
            out,
        } => commands::sweep(&scenario, &strategies, &seeds, out.as_deref()),
        Command::Replay { log, state_out } => commands::replay(&log, state_out.as_deref()),
        Command::Check { log, matrix, config } => commands::check(&log, matrix.as_deref(), config.as_deref()),
        Command::Plan { config, json } => commands::plan(&config, json),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
