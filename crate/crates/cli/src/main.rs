mod report;
mod sweep;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use taskreg_core::config::{load_scenario, ConfigError};
use taskreg_core::simulation::{simulate, ControllerKind, RunMetrics, Scenario, SimError, SimEventKind, TrajectoryLog};
use taskreg_core::trajectory_csv::write_csv;
use taskreg_core::verify::{parse_selector, Suite};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "taskreg",
    version,
    about = "Simulate and verify task-space internal-model regulators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trajectory.csv and metrics.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the controller in the file (full, vf, sat, p1, p2).
        #[arg(long, value_parser = parse_controller)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
    /// Run verification suites and print a pass/fail table.
    Verify {
        /// Suite name, comma-separated list, or `all`.
        #[arg(long, default_value = "all", value_parser = parse_suites)]
        suite: Selection,
    },
    /// Run one simulation per parameter value, in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: sweep::Param,
        /// Comma-separated values, e.g. `50,100,200`.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone)]
struct Selection(Vec<Suite>);

fn parse_suites(s: &str) -> Result<Selection, String> {
    parse_selector(s).map(Selection).map_err(|e| e.to_string())
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse()
        .map_err(|e: taskreg_core::simulation::UnknownController| e.to_string())
}

/// A failed command: message plus exit status.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(path: &Path, e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::new(EXIT_CONFIG, e.to_string()),
            _ => Self::new(EXIT_CONFIG, format!("{}: {e}", path.display())),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display()))
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    controller: ControllerKind,
    storage_function: String,
    dt: f64,
    t_end: f64,
    #[serde(flatten)]
    metrics: &'a RunMetrics,
    near_singular_events: usize,
}

pub fn load(path: &Path) -> Result<Scenario, Failure> {
    load_scenario(path).map_err(|e| Failure::config(path, e))
}

pub fn check_scenario(scn: &Scenario) -> Result<(), Failure> {
    scn.validate().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))
}

pub fn write_outputs(
    dir: &Path,
    log: &TrajectoryLog,
    metrics: Option<&RunMetrics>,
    scn: &Scenario,
) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let csv_path = dir.join("trajectory.csv");
    let file = File::create(&csv_path).map_err(|e| Failure::io(&csv_path, e))?;
    write_csv(log, BufWriter::new(file)).map_err(|e| Failure::io(&csv_path, e))?;
    if let Some(m) = metrics {
        let json_path = dir.join("metrics.json");
        let summary = Summary {
            controller: scn.controller,
            storage_function: log.storage_kind.to_string(),
            dt: scn.dt,
            t_end: scn.t_end,
            metrics: m,
            near_singular_events: log
                .events
                .iter()
                .filter(|e| e.kind == SimEventKind::NearSingular)
                .count(),
        };
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::io(&json_path, e))?;
        fs::write(&json_path, text + "\n").map_err(|e| Failure::io(&json_path, e))?;
    }
    Ok(())
}

/// Simulate and write outputs; a diverged run keeps its partial trajectory.
pub fn run_and_write(scn: &Scenario, dir: &Path) -> Result<RunMetrics, Failure> {
    match simulate(scn) {
        Ok((log, m)) => {
            write_outputs(dir, &log, Some(&m), scn)?;
            Ok(m)
        }
        Err(f) => {
            if let Some(log) = &f.log {
                write_outputs(dir, log, None, scn)?;
            }
            let code = match f.error {
                SimError::Diverged { .. } => EXIT_DIVERGED,
                SimError::InvalidScenario(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            };
            Err(Failure::new(code, f.error.to_string()))
        }
    }
}

fn cmd_simulate(
    config: &Path,
    out: &Path,
    controller: Option<ControllerKind>,
    dt: Option<f64>,
    t_end: Option<f64>,
) -> Result<(), Failure> {
    let mut scn = load(config)?;
    if let Some(c) = controller {
        scn.controller = c;
    }
    if let Some(dt) = dt {
        scn.dt = dt;
    }
    if let Some(t) = t_end {
        scn.t_end = t;
    }
    check_scenario(&scn)?;
    let m = run_and_write(&scn, out)?;
    println!(
        "{}: steady-state error {:.3e}, peak torque {:.3}, settling time {}",
        scn.controller,
        m.steady_state_error,
        m.peak_torque,
        m.settling_time.map_or("none".into(), |t| format!("{t:.3} s"))
    );
    println!(
        "wrote {} and {}",
        out.join("trajectory.csv").display(),
        out.join("metrics.json").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            controller,
            dt,
            t_end,
        } => cmd_simulate(&config, &out, controller, dt, t_end),
        Command::Verify { suite } => report::cmd_verify(&suite.0),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => sweep::cmd_sweep(&config, param, &values, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
