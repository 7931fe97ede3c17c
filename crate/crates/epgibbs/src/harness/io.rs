//! Deterministic text artifacts: CSV matrices and traces, JSON sidecars.
//! Floats are printed with the shortest round-trip representation so that
//! identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gibbs::ChainTrace;
use crate::kalman::SeriesData;

/// FNV-1a over the canonical JSON encoding of a config.
pub fn config_hash<T: serde::Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Dataset matrix: one row per series/item, empty cells for missing values.
pub fn write_matrix_csv(path: &Path, rows: &[Vec<Option<f64>>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let mut first = true;
        for cell in row {
            if !first {
                out.push(',');
            }
            if let Some(v) = cell {
                out.push_str(&fmt_f64(*v));
            }
            first = false;
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a dataset matrix; empty cells become missing values.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<Option<f64>>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let cell = cell.trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Config(format!("bad number '{cell}' at line {}", lineno + 1))
                })?;
                row.push(Some(v));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn series_from_rows(rows: &[Vec<Option<f64>>]) -> Result<Vec<SeriesData>> {
    rows.iter()
        .map(|r| SeriesData::with_missing(r.clone()))
        .collect()
}

/// Per-iteration trace with a header row and a config-hash comment line.
pub fn write_trace_csv(path: &Path, trace: &ChainTrace, hash: &str, with_mse: bool) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config-hash: {hash}").expect("string write");
    if with_mse {
        writeln!(
            out,
            "iteration,loglik,nmi,wall_seconds,mse_a,mse_lambda,mse_sigma_y2,mse_x,assignments_hash"
        )
        .expect("string write");
    } else {
        writeln!(out, "iteration,loglik,nmi,wall_seconds,assignments_hash").expect("string write");
    }
    for r in trace.records() {
        let nmi = r.nmi.map(fmt_f64).unwrap_or_default();
        if with_mse {
            let mse = r
                .mse
                .map(|m| {
                    format!(
                        "{},{},{},{}",
                        fmt_f64(m.a),
                        fmt_f64(m.lambda),
                        fmt_f64(m.sigma_y2),
                        fmt_f64(m.x)
                    )
                })
                .unwrap_or_else(|| ",,,".to_string());
            writeln!(
                out,
                "{},{},{},{},{},{:016x}",
                r.iteration,
                fmt_f64(r.loglik),
                nmi,
                fmt_f64(r.wall_seconds),
                mse,
                r.assignments_hash
            )
            .expect("string write");
        } else {
            writeln!(
                out,
                "{},{},{},{},{:016x}",
                r.iteration,
                fmt_f64(r.loglik),
                nmi,
                fmt_f64(r.wall_seconds),
                r.assignments_hash
            )
            .expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a label vector from a JSON file: either a bare array of integers
/// or an object with a `z` field (a truth sidecar).
pub fn read_labels_json(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let arr = match &value {
        serde_json::Value::Array(a) => a,
        serde_json::Value::Object(o) => o
            .get("z")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Config("labels JSON must be an array or have a z field".into()))?,
        _ => return Err(Error::Config("labels JSON must be an array".into())),
    };
    arr.iter()
        .map(|v| {
            v.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| Error::Config("labels must be nonnegative integers".into()))
        })
        .collect()
}
