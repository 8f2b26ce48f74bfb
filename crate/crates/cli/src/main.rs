use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fbopt_core::scenarios::checks::run_checks;
use fbopt_core::scenarios::{run, RunSummary, ScenarioConfig, SCENARIOS};
use fbopt_core::sim::{Status, Trajectory};
use fbopt_core::Error;

const EXIT_DIVERGED: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "fbopt", version, about = "Feedback-optimization scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write trace.csv and summary.json.
    Run {
        /// Scenario config (.json or .toml).
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Keep every N-th sample (the last sample is always kept).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        every: u64,
        /// Overrides the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the built-in scenarios.
    List,
    /// Run the built-in invariant checks.
    Check,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, every, seed } => run_config(&config, &out, every as usize, seed),
        Command::List => {
            for (name, description) in SCENARIOS {
                println!("{name:<20} {description}");
            }
            ExitCode::SUCCESS
        }
        Command::Check => check(),
    }
}

fn run_config(path: &Path, out: &Path, every: usize, seed: Option<u64>) -> ExitCode {
    let mut config = match ScenarioConfig::from_path(path) {
        Ok(config) => config,
        Err(e) => return fail(&e),
    };
    if let Some(seed) = seed {
        config.sim.seed = seed;
    }
    let result = run(&config).and_then(|output| output.finish(&config.scenario, every, &config.outputs));
    let (trace, summary) = match result {
        Ok(done) => done,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_outputs(out, &trace, &summary) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    println!(
        "{}: {:?} at t = {} ({} rows written to {})",
        summary.scenario,
        summary.status,
        summary.final_time,
        trace.len(),
        out.display()
    );
    if summary.status == Status::Diverged {
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    }
}

fn fail(error: &Error) -> ExitCode {
    eprintln!("error: {error}");
    match error.root() {
        Error::Config(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_SOLVER),
    }
}

fn write_outputs(out: &Path, trace: &Trajectory, summary: &RunSummary) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("trace.csv");
    let mut writer = csv::Writer::from_path(&csv_path).with_context(|| format!("opening {}", csv_path.display()))?;
    writer.write_record(std::iter::once("t").chain(trace.labels.iter().map(String::as_str)))?;
    for (t, x) in trace.times.iter().zip(&trace.states) {
        writer.write_record(std::iter::once(t).chain(x.iter()).map(f64::to_string))?;
    }
    writer.flush()?;
    let json = serde_json::to_string_pretty(summary)?;
    fs::write(out.join("summary.json"), json + "\n").context("writing summary.json")?;
    Ok(())
}

fn check() -> ExitCode {
    let outcomes = match run_checks() {
        Ok(outcomes) => outcomes,
        Err(e) => return fail(&e),
    };
    for c in &outcomes {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {:<48} {:.3e} (tolerance {:.1e})", c.name, c.value, c.tolerance);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
