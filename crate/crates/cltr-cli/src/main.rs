//! Command-line driver: `run` executes an experiment config end to end and
//! writes `results.csv` plus `run.json`; `verify` replays the brute-force
//! estimator fixtures and reports each check.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config or usage error.

use clap::{Parser, Subcommand};
use log::info;
use std::path::PathBuf;
use std::process::ExitCode;

use cltr::experiment::{run_experiment, write_report, ExperimentConfig};
use cltr::verify::{fixture_names, run_fixture};
use cltr::Error;

#[derive(Parser)]
#[command(name = "cltr", version, about = "Counterfactual learning-to-rank experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        /// Experiment config path.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for results.csv and run.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Bound the worker pool; output is identical at any setting.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Replay a named verification fixture ("all" runs every one).
    Verify {
        /// Fixture name.
        fixture: String,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(config_path: &PathBuf, out: &PathBuf, seed: Option<u64>, threads: Option<usize>) -> u8 {
    let text = match std::fs::read_to_string(config_path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", config_path.display());
            return 2;
        }
    };
    let mut config: ExperimentConfig = match toml::from_str(&text) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: invalid config {}: {e}", config_path.display());
            return 2;
        }
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let report = match run_experiment(&config, threads) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    match write_report(&report, out) {
        Ok((csv, json)) => {
            info!("wrote {} and {}", csv.display(), json.display());
            0
        }
        Err(e) => {
            eprintln!("error: cannot write report: {e}");
            1
        }
    }
}

fn verify(fixture: &str) -> u8 {
    let names: Vec<&str> =
        if fixture == "all" { fixture_names().to_vec() } else { vec![fixture] };
    let mut total = 0usize;
    let mut failed = 0usize;
    for name in names {
        let checks = match run_fixture(name) {
            Ok(checks) => checks,
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code_for(&e);
            }
        };
        for check in checks {
            total += 1;
            let verdict = if check.passed {
                "pass"
            } else {
                failed += 1;
                "FAIL"
            };
            println!("{name}/{}: {verdict} ({})", check.name, check.detail);
        }
    }
    println!("{total} checks, {failed} failed");
    u8::from(failed > 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run { config, out, seed, threads } => run(config, out, *seed, *threads),
        Command::Verify { fixture } => verify(fixture),
    };
    ExitCode::from(code)
}
