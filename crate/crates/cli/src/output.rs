//! Run artifacts: `trace.csv`, `summary.json` and `manifest.json`.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which parses back
//! to the identical `f64`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pbtrack_core::sim::SimulationTrace;
use serde::Serialize;

use crate::CliError;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn trace_columns(trace: &SimulationTrace) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend(trace.state_names.iter().cloned());
    cols.extend(trace.state_names.iter().map(|s| format!("{s}_ref")));
    cols.extend(trace.input_names.iter().cloned());
    cols.extend(trace.input_names.iter().map(|s| format!("{s}_ref")));
    cols.extend((1..=trace.input_names.len()).map(|i| format!("y{i}")));
    cols.extend((1..=trace.input_names.len()).map(|i| format!("z{i}")));
    cols.extend(trace.aux_names.iter().cloned());
    cols.extend(["V", "W", "supply", "saturated"].map(String::from));
    cols
}

pub fn write_trace_csv(path: &Path, trace: &SimulationTrace) -> Result<(), CliError> {
    let io = |e| CliError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{}", trace_columns(trace).join(",")).map_err(io)?;
    let mut line = String::new();
    for k in 0..trace.len() {
        line.clear();
        let mut push = |v: f64| {
            if !line.is_empty() {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        };
        push(trace.t[k]);
        for s in [&trace.x, &trace.x_star, &trace.u, &trace.u_star, &trace.y, &trace.z, &trace.aux] {
            s.row(k).iter().for_each(|v| push(*v));
        }
        push(trace.v[k]);
        push(trace.w[k]);
        push(trace.supply[k]);
        line.push_str(if trace.saturated[k] { ",1" } else { ",0" });
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Header and rows of a trace file.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(format!("{}: row {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.to_path_buf())
}
