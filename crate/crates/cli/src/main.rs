//! Command-line front end: run scenario files, validate them, replay
//! recorded traces.
//!
//! Exit codes: 0 success (all expectations hold / file valid / trace
//! matches), 1 failed expectations or mismatched replay, 2 usage or parse
//! errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use euicc_sim::scenario::{parse_scenario, replay, run, RunOptions};

#[derive(Parser)]
#[command(name = "euicc-sim", version, about = "Deterministic eUICC remote-provisioning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and evaluate its expectations.
    Run {
        /// Scenario file.
        file: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace log (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Load/save the EIS registry at this path.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Emit the report as JSON instead of text.
        #[arg(long)]
        json_report: bool,
    },
    /// Parse and validate a scenario file without running it.
    Validate {
        /// Scenario file.
        file: PathBuf,
    },
    /// Re-execute the scenario embedded in a trace file and verify the
    /// log matches octet for octet.
    Replay {
        /// Trace file produced by `run --trace`.
        trace: PathBuf,
    },
}

fn read_scenario(path: &PathBuf) -> Result<euicc_sim::scenario::Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_scenario(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            file,
            seed,
            trace,
            registry,
            json_report,
        } => {
            let scenario = match read_scenario(&file) {
                Ok(s) => s,
                Err(message) => {
                    eprintln!("error: {message}");
                    return ExitCode::from(2);
                }
            };
            let options = RunOptions {
                seed_override: seed,
                trace_path: trace,
                registry_path: registry,
            };
            match run(&scenario, &options) {
                Ok(report) => {
                    if json_report {
                        println!(
                            "{}",
                            serde_json::to_string_pretty(&report).expect("report serializes")
                        );
                    } else {
                        print!("{}", report.render());
                    }
                    if report.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Validate { file } => match read_scenario(&file) {
            Ok(scenario) => {
                println!(
                    "ok: {} ({} actors, {} steps, {} expectations)",
                    scenario.name,
                    scenario.actors.len(),
                    scenario.steps.len(),
                    scenario.expectations.len()
                );
                ExitCode::SUCCESS
            }
            Err(message) => {
                eprintln!("error: {message}");
                ExitCode::from(2)
            }
        },
        Command::Replay { trace } => match replay(&trace) {
            Ok(report) => {
                println!(
                    "replay {}: {} (seed {}) — {}",
                    if report.matched { "ok" } else { "MISMATCH" },
                    report.scenario,
                    report.seed,
                    report.detail
                );
                if report.matched {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(err) => {
                eprintln!("error: {err}");
                ExitCode::from(2)
            }
        },
    }
}
