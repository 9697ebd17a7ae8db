//! Trajectory CSV export and re-import.
//!
//! One row per recorded sample:
//! `t,x_1..x_N,z_1..z_N,wx_1..wx_N,wz_1..wz_N,dist_Astar,V,iss_bound,slack`.
//! Floats are written with the shortest round-trip representation, so a
//! re-parsed file reproduces the exact values; derived columns are `NaN`
//! where no certificate or equilibrium applies.

use std::io::{BufRead, Write};

use super::run::DerivedSeries;
use super::HarnessError;
use crate::dynamics::TrajectoryRecord;

pub fn trajectory_header(n: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for prefix in ["x", "z", "wx", "wz"] {
        for i in 1..=n {
            cols.push(format!("{prefix}_{i}"));
        }
    }
    cols.extend(
        ["dist_Astar", "V", "iss_bound", "slack"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    record: &TrajectoryRecord,
    derived: &DerivedSeries,
) -> std::io::Result<()> {
    writeln!(out, "{}", trajectory_header(record.n))?;
    for (i, s) in record.samples.iter().enumerate() {
        let mut row = String::with_capacity(128);
        row.push_str(&s.t.to_string());
        for vec in [&s.x, &s.z, &s.wx, &s.wz] {
            for v in vec.iter() {
                row.push(',');
                row.push_str(&format!("{v}"));
            }
        }
        for v in [
            derived.dist[i],
            derived.v[i],
            derived.iss_bound[i],
            derived.slack[i],
        ] {
            row.push(',');
            row.push_str(&format!("{v}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// A parsed trajectory row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub wx: Vec<f64>,
    pub wz: Vec<f64>,
    pub dist: f64,
    pub v: f64,
    pub iss_bound: f64,
    pub slack: f64,
}

pub fn read_trajectory_csv<R: BufRead>(reader: R) -> Result<Vec<CsvRow>, HarnessError> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(HarnessError::CsvParse {
        line: 1,
        reason: "empty file".into(),
    })?;
    let header = header?;
    let cols = header.split(',').count();
    // 1 + 4n + 4 columns
    if cols < 9 || (cols - 5) % 4 != 0 {
        return Err(HarnessError::CsvParse {
            line: 1,
            reason: format!("unexpected column count {cols}"),
        });
    }
    let n = (cols - 5) / 4;

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(HarnessError::CsvParse {
                line: line_no,
                reason: format!("expected {cols} fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, HarnessError> {
            s.parse::<f64>().map_err(|e| HarnessError::CsvParse {
                line: line_no,
                reason: format!("bad float `{s}`: {e}"),
            })
        };
        let t = fields[0]
            .parse::<usize>()
            .map_err(|e| HarnessError::CsvParse {
                line: line_no,
                reason: format!("bad time index: {e}"),
            })?;
        let block = |start: usize| -> Result<Vec<f64>, HarnessError> {
            fields[start..start + n].iter().map(|s| parse(s)).collect()
        };
        rows.push(CsvRow {
            t,
            x: block(1)?,
            z: block(1 + n)?,
            wx: block(1 + 2 * n)?,
            wz: block(1 + 3 * n)?,
            dist: parse(fields[1 + 4 * n])?,
            v: parse(fields[2 + 4 * n])?,
            iss_bound: parse(fields[3 + 4 * n])?,
            slack: parse(fields[4 + 4 * n])?,
        });
    }
    Ok(rows)
}
