//! File writers. Every float goes out with nine significant digits so that
//! reruns diff cleanly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use predpid::simulator::{Metrics, SimResult};
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const SIM_HEADER: &str = "time,r1,r2,y1,y2,u1,u2,e_m";

pub fn num(v: f64) -> String {
    format!("{v:.8e}")
}

/// `v` rounded to nine significant digits (non-finite values pass through).
pub fn sig9(v: f64) -> f64 {
    if v.is_finite() {
        num(v).parse().unwrap_or(v)
    } else {
        v
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64().and_then(|x| serde_json::Number::from_f64(sig9(x))) {
                *n = x;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::io(path, e))?;
    round_value(&mut v);
    let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write(path, &text)
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Rows of numbers under a fixed header.
pub fn csv<I, R>(header: &str, rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = f64>,
{
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(num).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn simulation_csv(res: &SimResult) -> String {
    csv(
        SIM_HEADER,
        (0..res.time.len()).map(|k| {
            [
                res.time[k], res.r1[k], res.r2[k], res.y1[k], res.y2[k], res.u1[k], res.u2[k], res.e_m[k],
            ]
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub controller: String,
    pub abs_peak: f64,
    pub mean: f64,
    pub rms: f64,
    /// Delayed-loop verdict; `None` for the PI baselines, which are not
    /// certified.
    pub stable: Option<bool>,
    pub spectral_radius: Option<f64>,
}

/// Peak/mean/RMS of `e_m` per controller, one row each.
pub fn comparison_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("controller".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>15}  {:>15}  {:>15}", "controller", "peak |e_m|", "mean e_m", "RMS e_m");
    for (label, m) in rows {
        let _ = writeln!(
            out,
            "{label:<width$}  {:>15}  {:>15}  {:>15}",
            num(m.abs_peak),
            num(m.mean),
            num(m.rms)
        );
    }
    out
}

pub fn comparison_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("controller,abs_peak,mean,rms\n");
    for (label, m) in rows {
        let _ = writeln!(out, "{label},{},{},{}", num(m.abs_peak), num(m.mean), num(m.rms));
    }
    out
}
