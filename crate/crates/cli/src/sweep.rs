use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;

use taskreg_core::simulation::{RunMetrics, Scenario};

use crate::{check_scenario, load, run_and_write, Failure, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Param {
    Kp,
    Kd,
    H,
    Dt,
}

impl Param {
    fn name(self) -> &'static str {
        match self {
            Param::Kp => "kp",
            Param::Kd => "kd",
            Param::H => "h",
            Param::Dt => "dt",
        }
    }

    fn apply(self, scn: &mut Scenario, v: f64) {
        match self {
            Param::Kp => scn.gains.kp = v,
            Param::Kd => scn.gains.kd = v,
            Param::H => scn.gains.h = v,
            Param::Dt => scn.dt = v,
        }
    }
}

pub fn parse_values(list: &str) -> Result<Vec<f64>, Failure> {
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Failure::new(EXIT_CONFIG, format!("`{s}` is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "--values is empty"));
    }
    Ok(values)
}

#[derive(Serialize)]
struct Row {
    param: &'static str,
    value: f64,
    status: String,
    settling_time: Option<f64>,
    steady_state_error: Option<f64>,
    peak_torque: Option<f64>,
    min_abs_det_j: Option<f64>,
    dissipation_defect: Option<f64>,
    peak_xi_hat: Option<f64>,
    final_time: Option<f64>,
    dir: String,
}

impl Row {
    fn new(param: Param, value: f64, dir: &Path, result: &Result<RunMetrics, Failure>) -> Self {
        let m = result.as_ref().ok();
        Row {
            param: param.name(),
            value,
            status: match result {
                Ok(_) => "ok".into(),
                Err(f) if f.code == EXIT_DIVERGED => "diverged".into(),
                Err(_) => "failed".into(),
            },
            settling_time: m.and_then(|m| m.settling_time),
            steady_state_error: m.map(|m| m.steady_state_error),
            peak_torque: m.map(|m| m.peak_torque),
            min_abs_det_j: m.map(|m| m.min_abs_det_j),
            dissipation_defect: m.map(|m| m.dissipation_defect),
            peak_xi_hat: m.and_then(|m| m.peak_xi_hat),
            final_time: m.map(|m| m.final_time),
            dir: dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }
}

pub fn cmd_sweep(config: &Path, param: Param, values: &str, out: &Path) -> Result<(), Failure> {
    let values = parse_values(values)?;
    let base = load(config)?;
    let runs: Vec<(f64, Scenario, PathBuf)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut scn = base.clone();
            param.apply(&mut scn, v);
            check_scenario(&scn).map_err(|f| Failure::new(f.code, format!("{}={v}: {}", param.name(), f.message)))?;
            Ok((v, scn, out.join(format!("{i:03}_{}={v}", param.name()))))
        })
        .collect::<Result<_, Failure>>()?;

    let results: Vec<Result<RunMetrics, Failure>> =
        runs.par_iter().map(|(_, scn, dir)| run_and_write(scn, dir)).collect();

    fs::create_dir_all(out).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    let table = out.join("sweep.csv");
    let write = || -> Result<(), Box<dyn std::error::Error>> {
        let mut w = csv::Writer::from_writer(File::create(&table)?);
        for ((v, _, dir), r) in runs.iter().zip(&results) {
            w.serialize(Row::new(param, *v, dir, r))?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", table.display())))?;

    let mut worst = 0;
    for ((v, _, _), r) in runs.iter().zip(&results) {
        match r {
            Ok(m) => println!(
                "{}={v}: steady-state error {:.3e}, peak torque {:.3}",
                param.name(),
                m.steady_state_error,
                m.peak_torque
            ),
            Err(f) => {
                eprintln!("{}={v}: {}", param.name(), f.message);
                worst = worst.max(f.code);
            }
        }
    }
    println!("wrote {}", table.display());
    match worst {
        0 => Ok(()),
        code => Err(Failure::new(code, "")),
    }
}
