//! CSV export of trajectory logs.
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! parsing a file gives back the logged numbers bit for bit.

use std::io::{Read, Write};

use thiserror::Error;

use crate::simulation::TrajectoryLog;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Number { row: usize, column: String, value: String },
    #[error("row {row} has {got} fields, header has {expected}")]
    Width { row: usize, expected: usize, got: usize },
}

/// Column names for `n` joints, with `ξ̂` columns when `filtered`.
pub fn header(n: usize, filtered: bool) -> Vec<String> {
    let series = |prefix: &'static str| (1..=n).map(move |i| format!("{prefix}{i}"));
    let mut h = vec!["t".to_string()];
    h.extend(series("q"));
    h.extend(series("xi"));
    h.extend(series("e"));
    h.extend(series("u"));
    h.extend(series("d1_"));
    h.extend(series("d2_"));
    h.extend(series("d_"));
    if filtered {
        h.extend(series("xihat"));
    }
    h.push("V_storage".into());
    h.push("detJ".into());
    h
}

pub fn write_csv<W: Write>(log: &TrajectoryLog, out: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    let filtered = log.has_filter();
    w.write_record(header(log.n_joints, filtered))?;
    let mut row: Vec<String> = Vec::new();
    for r in &log.records {
        row.clear();
        row.push(r.t.to_string());
        for series in [&r.q, &r.xi, &r.e, &r.u, &r.d1, &r.d2, &r.d] {
            row.extend(series.iter().map(f64::to_string));
        }
        if filtered {
            match &r.xi_hat {
                Some(v) => row.extend(v.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n("NaN".to_string(), log.n_joints)),
            }
        }
        row.push(r.storage.to_string());
        row.push(r.det_j.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed trajectory file: header plus numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<CsvTable, CsvError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(CsvError::Width {
                row: i + 1,
                expected: header.len(),
                got: rec.len(),
            });
        }
        let row = rec
            .iter()
            .zip(&header)
            .map(|(v, col)| {
                v.trim().parse::<f64>().map_err(|_| CsvError::Number {
                    row: i + 1,
                    column: col.clone(),
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}
