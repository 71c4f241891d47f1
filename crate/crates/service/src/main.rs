use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gripforce_core::analysis::{AnovaOptions, SphericityCorrection};
use gripforce_service::commands::{self, RunOptions};
use gripforce_service::error::ServiceError;
use gripforce_service::persist::Mode;
use gripforce_service::report::analyze_dirs;

#[derive(Parser)]
#[command(name = "gripforce", version, about = "Grip-force rig: calibration, sessions, analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Synthetic,
    Replay,
    Interactive,
}

#[derive(Subcommand)]
enum Command {
    /// Fit calibration constants from a sweep CSV and append them to a profile file
    Calibrate {
        sweep: PathBuf,
        #[arg(long, default_value = "profile.json")]
        out: PathBuf,
    },
    /// Write a simulated calibration sweep
    GenerateSweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 21)]
        points: usize,
        /// Add sensor noise
        #[arg(long)]
        noise: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Home both simulated tactor drives
    Home {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate a whole study, one session directory per subject
    SimulateStudy {
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one session
    Run {
        #[arg(long, value_enum)]
        mode: RunMode,
        /// Seeds the trial plan
        #[arg(long)]
        plan_seed: u64,
        /// Seeds the simulated rig (and participant, in synthetic mode)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "P01")]
        participant: String,
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Stop after this many trials
        #[arg(long)]
        trials: Option<usize>,
        /// Slow virtual-clock runs to this multiple of real time
        #[arg(long)]
        pace: Option<f64>,
        /// Serve telemetry on this port
        #[arg(long, env = "PORT")]
        serve: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Grip script for replay: `trial,grip_N` rows
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyze recorded sessions and write a report
    Analyze {
        /// Session directories, or directories containing sessions
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Add Greenhouse-Geisser corrected p-values
        #[arg(long)]
        gg: bool,
    },
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn execute(cli: Cli) -> Result<(), ServiceError> {
    match cli.command {
        Command::Calibrate { sweep, out } => {
            let profile = commands::calibrate(&sweep, &out)?;
            for w in profile.warnings() {
                eprintln!("{}", serde_json::json!({ "warning": w }));
            }
            println!("{}", json(&profile.coefficients));
        }
        Command::GenerateSweep {
            out,
            points,
            noise,
            seed,
        } => commands::generate_sweep_file(&out, points, noise, seed)?,
        Command::Home { seed } => println!("{}", json(&commands::home(seed)?)),
        Command::SimulateStudy {
            subjects,
            seed,
            profile,
            out,
        } => {
            let results = commands::simulate_study(subjects, seed, &out, profile.as_deref())?;
            for s in &results {
                println!("{}", s.dir.display());
            }
        }
        Command::Run {
            mode,
            plan_seed,
            seed,
            participant,
            profile,
            trials,
            pace,
            serve,
            bind,
            script,
            out,
        } => {
            let summary = commands::run(&RunOptions {
                mode: match mode {
                    RunMode::Synthetic => Mode::Synthetic,
                    RunMode::Replay => Mode::Replay,
                    RunMode::Interactive => Mode::Interactive,
                },
                plan_seed,
                participant,
                seed,
                profile,
                max_trials: trials,
                pace,
                serve: serve.map(|p| format!("{bind}:{p}")),
                script,
                out,
            })?;
            println!(
                "{}",
                serde_json::json!({
                    "session": summary.dir,
                    "trials": summary.manifest.trials.len(),
                    "status": summary.manifest.status,
                })
            );
        }
        Command::Analyze { inputs, out, gg } => {
            let options = AnovaOptions {
                sphericity: if gg {
                    SphericityCorrection::GreenhouseGeisser
                } else {
                    SphericityCorrection::None
                },
            };
            let (_, summary) = analyze_dirs(&inputs, &out, options)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.category(), "message": e.to_string() })
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
