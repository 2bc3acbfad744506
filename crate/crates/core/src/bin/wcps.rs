use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wcps_core::error::Error;
use wcps_core::scenario::runner::static_schedule;
use wcps_core::scenario::sweep::write_rows_csv;
use wcps_core::scenario::trace::write_trace;
use wcps_core::scenario::{check_stability, run_scenario, sweep, ScenarioConfig, SweepParam};

/// Simulator for control loops closed over a lossy multi-hop wireless network.
#[derive(Parser)]
#[command(name = "wcps", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Directory for output files (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario, write trace.csv and summary.json.
    Run { config: PathBuf },
    /// Run a scenario for every (value, seed) combination.
    Sweep {
        config: PathBuf,
        /// delta or loss_prob
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Mean-square stability per mode and the average dwell time.
    Stability { config: PathBuf },
    /// Synthesize the static round schedule.
    Schedule { config: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 2,
        Error::Infeasible(_) => 3,
        _ => 1,
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Error> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>, name: &str) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(dir) = out {
        std::fs::write(dir.join(name), text + "\n")?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<u8, Error> {
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    match cli.cmd {
        Cmd::Run { config } => {
            let cfg = load(&config, cli.seed)?;
            let run = run_scenario(&cfg)?;
            let dir = out.unwrap_or(Path::new("."));
            write_trace(&dir.join("trace.csv"), &run.trace)?;
            emit(&run.summary, Some(dir), "summary.json")?;
            if !run.summary.stable {
                eprintln!("divergence: {}", run.summary.divergence.as_deref().unwrap_or("guard hit"));
                return Ok(2);
            }
        }
        Cmd::Sweep { config, param, values, seeds } => {
            let cfg = load(&config, None)?;
            let table = sweep(&cfg, SweepParam::from_name(&param)?, &values, &seeds)?;
            emit(&table.aggregates, out, "sweep.json")?;
            if let Some(dir) = out {
                write_rows_csv(&dir.join("sweep.csv"), &table)?;
            }
        }
        Cmd::Stability { config } => {
            let cfg = load(&config, cli.seed)?;
            emit(&check_stability(&cfg)?, out, "stability.json")?;
        }
        Cmd::Schedule { config } => {
            let cfg = load(&config, cli.seed)?;
            emit(&static_schedule(&cfg)?, out, "schedule.json")?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
