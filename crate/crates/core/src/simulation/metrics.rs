use serde::{Deserialize, Serialize};

use super::{Record, TrajectoryLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// First logged time after which `‖e‖ < tol` for the rest of the run.
    pub settling_time: Option<f64>,
    /// `max ‖e‖` over the last 10% of the horizon.
    pub steady_state_error: f64,
    /// `max ‖u‖∞` over the run.
    pub peak_torque: f64,
    pub min_abs_det_j: f64,
    /// `|S(T) − S(0) − ∫ rate|` divided by `|S(0)|`; NaN when the storage
    /// function is unavailable.
    pub dissipation_defect: f64,
    /// `max ‖ξ̂‖` for filtered laws.
    pub peak_xi_hat: Option<f64>,
    pub final_time: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Index of the first record of the last 10% of the horizon.
pub fn tail_start(records: &[Record]) -> usize {
    let (Some(first), Some(last)) = (records.first(), records.last()) else {
        return 0;
    };
    let cut = last.t - 0.1 * (last.t - first.t);
    records.iter().position(|r| r.t >= cut - 1e-12).unwrap_or(0)
}

pub fn metrics(log: &TrajectoryLog, tol: f64) -> RunMetrics {
    let rec = &log.records;
    let settling_time = match rec.iter().rposition(|r| norm(&r.e) >= tol) {
        None => rec.first().map(|r| r.t),
        Some(i) if i + 1 < rec.len() => Some(rec[i + 1].t),
        Some(_) => None,
    };
    let steady_state_error = rec[tail_start(rec)..].iter().map(|r| norm(&r.e)).fold(0.0, f64::max);
    let peak_torque = rec.iter().map(|r| inf_norm(&r.u)).fold(0.0, f64::max);
    let min_abs_det_j = rec.iter().map(|r| r.det_j.abs()).fold(f64::INFINITY, f64::min);
    let peak_xi_hat = log.has_filter().then(|| {
        rec.iter()
            .filter_map(|r| r.xi_hat.as_deref())
            .map(norm)
            .fold(0.0, f64::max)
    });
    let dissipation_defect = match (rec.first(), rec.last()) {
        (Some(a), Some(b)) => {
            let scale = if a.storage.abs() > 0.0 { a.storage.abs() } else { 1.0 };
            (b.storage - a.storage - (b.dissipated - a.dissipated)).abs() / scale
        }
        _ => f64::NAN,
    };
    RunMetrics {
        settling_time,
        steady_state_error,
        peak_torque,
        min_abs_det_j,
        dissipation_defect,
        peak_xi_hat,
        final_time: rec.last().map_or(0.0, |r| r.t),
    }
}
