//! Scenario-file front end for `pbtrack-core`.
//!
//! A scenario is a TOML file naming a plant (`boost_pfc` or `mmc`), its
//! parameters, the controller, the integration settings, optional parameter
//! events and the metrics to report. Running one writes `trace.csv`,
//! `summary.json` and `manifest.json` into an output directory.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid configuration,
//! 3 numerical failure (divergence, infeasible reference, failed property
//! suite).

pub mod config;
pub mod output;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use pbtrack_core::props::{run_property_suite, PropertyConfig, PropertyReport};
use pbtrack_core::sim::{run_closed_loop, Scenario, SimulationTrace};
use pbtrack_core::Execution;
use serde::Serialize;

pub use config::ScenarioSpec;
pub use report::Summary;

/// Environment variable holding the default output directory.
pub const OUT_ENV: &str = "PBTRACK_OUT";
pub const DEFAULT_OUT: &str = "pbtrack-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<pbtrack_core::Error> for CliError {
    fn from(e: pbtrack_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

/// Bundled scenarios.
pub const PRESETS: &[(&str, &str)] = &[
    ("boost_table1", include_str!("../presets/boost_table1.toml")),
    ("boost_table1_tanh", include_str!("../presets/boost_table1_tanh.toml")),
    ("boost_loadstep", include_str!("../presets/boost_loadstep.toml")),
    ("mmc_fig7", include_str!("../presets/mmc_fig7.toml")),
];

pub fn preset(name: &str) -> Result<&'static str, CliError> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, src)| *src).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("unknown preset `{name}` (available: {})", names.join(", ")))
    })
}

/// Output directory: the explicit one, else `$PBTRACK_OUT/<name>`, else
/// `pbtrack-out/<name>`.
pub fn out_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
            .join(name),
    }
}

/// A finished, summarised run.
#[derive(Debug)]
pub struct RunOutcome {
    pub spec: ScenarioSpec,
    pub scenario: Scenario,
    pub trace: SimulationTrace,
    pub summary: Summary,
}

/// Parses, simulates and summarises without touching the filesystem.
pub fn simulate_source(src: &str) -> Result<RunOutcome, CliError> {
    let spec = ScenarioSpec::parse(src)?;
    let scenario = spec.resolve()?;
    let start = Instant::now();
    let trace = run_closed_loop(&scenario)?;
    let runtime = start.elapsed().as_secs_f64();
    let summary = report::summarize(&spec, &scenario, &trace, runtime)?;
    Ok(RunOutcome {
        spec,
        scenario,
        trace,
        summary,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    source: &'a str,
    plant: &'static str,
    /// Runs are deterministic; no random seed is involved.
    seed: Option<u64>,
    scenario_file: &'a ScenarioSpec,
    resolved: &'a Scenario,
    trace_columns: Vec<String>,
    artifacts: [&'static str; 3],
}

/// Runs a scenario and writes its artifacts into `out`.
pub fn run_scenario_source(src: &str, source_label: &str, out: &Path) -> Result<RunOutcome, CliError> {
    let outcome = simulate_source(src)?;
    write_artifacts(&outcome, source_label, out)?;
    Ok(outcome)
}

pub fn run_scenario_file(path: &Path, out: &Path) -> Result<RunOutcome, CliError> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    run_scenario_source(&src, &path.display().to_string(), out)
}

pub fn write_artifacts(outcome: &RunOutcome, source_label: &str, out: &Path) -> Result<(), CliError> {
    output::ensure_dir(out)?;
    output::write_trace_csv(&out.join(output::TRACE_FILE), &outcome.trace)?;
    output::write_json(&out.join(output::SUMMARY_FILE), &outcome.summary)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        source: source_label,
        plant: outcome.spec.plant_id(),
        seed: None,
        scenario_file: &outcome.spec,
        resolved: &outcome.scenario,
        trace_columns: output::trace_columns(&outcome.trace),
        artifacts: [output::TRACE_FILE, output::SUMMARY_FILE, output::MANIFEST_FILE],
    };
    output::write_json(&out.join(output::MANIFEST_FILE), &manifest)
}

/// Runs the randomized property suite; writes `props.json` when `out` is given.
pub fn run_props(cfg: &PropertyConfig, exec: Execution, out: Option<&Path>) -> Result<PropertyReport, CliError> {
    let report = run_property_suite(cfg, exec)?;
    if let Some(dir) = out {
        output::ensure_dir(dir)?;
        output::write_json(&dir.join("props.json"), &report)?;
    }
    Ok(report)
}
