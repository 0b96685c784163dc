//! Scenario file schema (TOML) and its resolution into a core [`Scenario`].

use pbtrack_core::boost::{BoostConfig, BoostGains, BoostParams};
use pbtrack_core::control::ControllerMode;
use pbtrack_core::mmc::{MmcConfig, MmcParams};
use pbtrack_core::sim::{MonitorToggles, ParamChange, ParamEvent, PlantConfig, Scenario, SimConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Common shape of every scenario file; `P`, `C` and `M` are the
/// plant-specific `[params]`, `[controller]` and `[metrics]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile<P, C, M> {
    pub schema_version: u32,
    pub plant: String,
    pub params: P,
    pub controller: C,
    pub sim: SimBlock,
    #[serde(default)]
    pub events: Vec<EventBlock>,
    #[serde(default)]
    pub metrics: M,
    #[serde(default)]
    pub monitors: MonitorsBlock,
}

pub type BoostFile = ScenarioFile<BoostParams, BoostController, BoostMetrics>;
pub type MmcFile = ScenarioFile<MmcParams, MmcController, MmcMetrics>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub z0: Option<Vec<f64>>,
}

/// A parameter change; exactly one of `set` and `scale` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventBlock {
    pub t: f64,
    pub param: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorsBlock {
    #[serde(default = "yes")]
    pub dissipation: bool,
    #[serde(default = "yes")]
    pub lyapunov: bool,
    #[serde(default = "yes")]
    pub augmented_output: bool,
}

impl Default for MonitorsBlock {
    fn default() -> Self {
        Self {
            dissipation: true,
            lyapunov: true,
            augmented_output: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Linear,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostController {
    #[serde(default = "linear")]
    pub mode: ModeName,
    #[serde(rename = "Kp")]
    pub kp: f64,
    #[serde(rename = "Ki")]
    pub ki: f64,
    /// Required in tanh mode.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    pub kp_comp: f64,
    pub ki_comp: f64,
    #[serde(default)]
    pub phi_min: f64,
    pub phi_max: f64,
    #[serde(default)]
    pub e_rms_override: Option<f64>,
    #[serde(default = "derivative_cutoff")]
    pub derivative_cutoff_hz: f64,
    #[serde(default = "outer_rate")]
    pub outer_rate_per_period: f64,
    #[serde(default = "yes")]
    pub diode_clamp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostMetrics {
    /// Steady window length in line periods, ending at `t_end`.
    #[serde(default = "five")]
    pub steady_periods: usize,
    #[serde(default = "harmonics")]
    pub harmonics: usize,
    /// Relative half-width of the output-voltage band.
    #[serde(default = "two_percent")]
    pub band: f64,
    /// Moving-average length (s) applied to `v_C` before band checks.
    #[serde(default = "ten_ms")]
    pub smoothing: f64,
    #[serde(default)]
    pub settle_by: Option<f64>,
    #[serde(default)]
    pub recover_within: Option<f64>,
}

impl Default for BoostMetrics {
    fn default() -> Self {
        Self {
            steady_periods: 5,
            harmonics: 40,
            band: 0.02,
            smoothing: 0.01,
            settle_by: None,
            recover_within: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmcController {
    #[serde(rename = "Kp")]
    pub kp: [[f64; 2]; 2],
    #[serde(rename = "Ki")]
    pub ki: [[f64; 2]; 2],
    #[serde(default = "hpf_cutoff")]
    pub hpf_cutoff: f64,
    #[serde(default, rename = "W_sigma_ref")]
    pub w_sigma_ref: Option<f64>,
    #[serde(default, rename = "W_delta_ref")]
    pub w_delta_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmcMetrics {
    #[serde(default = "five")]
    pub steady_periods: usize,
    /// Allowed RMS error of `i_v` relative to the reference amplitude.
    #[serde(default = "three_percent")]
    pub i_v_band: f64,
    /// Allowed RMS error of the arm voltages relative to their reference RMS.
    #[serde(default = "five_percent")]
    pub u_c_band: f64,
}

impl Default for MmcMetrics {
    fn default() -> Self {
        Self {
            steady_periods: 5,
            i_v_band: 0.03,
            u_c_band: 0.05,
        }
    }
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn harmonics() -> usize {
    pbtrack_core::metrics::DEFAULT_HARMONICS
}
fn yes() -> bool {
    true
}
fn linear() -> ModeName {
    ModeName::Linear
}
fn derivative_cutoff() -> f64 {
    2000.0
}
fn outer_rate() -> f64 {
    100.0
}
fn two_percent() -> f64 {
    0.02
}
fn three_percent() -> f64 {
    0.03
}
fn five_percent() -> f64 {
    0.05
}
fn ten_ms() -> f64 {
    0.01
}
fn hpf_cutoff() -> f64 {
    5.0
}

/// A parsed scenario file, by plant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    Boost(BoostFile),
    Mmc(MmcFile),
}

#[derive(Deserialize)]
struct Header {
    schema_version: Option<u32>,
    plant: Option<String>,
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(if path.is_empty() { msg.to_string() } else { format!("{path}: {msg}") })
}

/// Dotted key path of a deserialisation error; a missing field is appended
/// to the path of the table it is missing from.
fn located<T: DeserializeOwned>(src: &str) -> Result<T, CliError> {
    let de = toml::Deserializer::parse(src).map_err(|e| CliError::Config(e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        let msg = e.inner().message().trim().to_string();
        if let Some(field) = msg.strip_prefix("missing field `").and_then(|s| s.strip_suffix('`')) {
            let full = if path.is_empty() { field.to_string() } else { format!("{path}.{field}") };
            return config_err(&full, "missing required key");
        }
        config_err(&path, msg)
    })
}

impl ScenarioSpec {
    pub fn parse(src: &str) -> Result<Self, CliError> {
        let header: Header = toml::from_str(src).map_err(|e| CliError::Config(e.message().to_string()))?;
        match header.schema_version {
            None => return Err(config_err("schema_version", "missing required key")),
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(config_err("schema_version", format!("unsupported version {v}"))),
        }
        let spec = match header.plant.as_deref() {
            None => return Err(config_err("plant", "missing required key")),
            Some("boost_pfc") => ScenarioSpec::Boost(located(src)?),
            Some("mmc") => ScenarioSpec::Mmc(located(src)?),
            Some(other) => {
                return Err(config_err("plant", format!("unknown plant `{other}` (expected boost_pfc or mmc)")));
            }
        };
        spec.resolve()?;
        Ok(spec)
    }

    pub fn plant_id(&self) -> &'static str {
        match self {
            ScenarioSpec::Boost(_) => "boost_pfc",
            ScenarioSpec::Mmc(_) => "mmc",
        }
    }

    /// Validated core scenario.
    pub fn resolve(&self) -> Result<Scenario, CliError> {
        let (plant, sim, events, monitors) = match self {
            ScenarioSpec::Boost(f) => (PlantConfig::Boost(boost_config(f)?), &f.sim, &f.events, f.monitors),
            ScenarioSpec::Mmc(f) => (PlantConfig::Mmc(mmc_config(f)), &f.sim, &f.events, f.monitors),
        };
        let mut cfg = SimConfig::new(sim.dt, sim.t_end).record_every(sim.record_every);
        for (i, ev) in events.iter().enumerate() {
            let change = match (ev.set, ev.scale) {
                (Some(v), None) => ParamChange::Set(v),
                (None, Some(s)) => ParamChange::Scale(s),
                _ => return Err(config_err(&format!("events[{i}]"), "exactly one of `set` and `scale` is required")),
            };
            cfg.events.push(ParamEvent {
                t: ev.t,
                param: ev.param.clone(),
                change,
            });
        }
        cfg.validate().map_err(|e| config_err("sim", e))?;
        let scenario = Scenario {
            plant,
            sim: cfg,
            x0: sim.x0.clone(),
            z0: sim.z0.clone(),
            monitors: MonitorToggles {
                dissipation: monitors.dissipation,
                lyapunov: monitors.lyapunov,
                augmented_output: monitors.augmented_output,
            },
        };
        let mut lp = scenario.plant.build().map_err(|e| config_err("", e))?;
        let n = lp.state_names().len();
        if let Some(x0) = &scenario.x0 {
            if x0.len() != n {
                return Err(config_err("sim.x0", format!("expected {n} entries, got {}", x0.len())));
            }
        }
        if let Some(z0) = &scenario.z0 {
            lp.set_integrator(z0).map_err(|e| config_err("sim.z0", e))?;
        }
        for (i, ev) in scenario.sim.events.iter().enumerate() {
            lp.apply_event(&ev.param, ev.change)
                .map_err(|e| config_err(&format!("events[{i}]"), e))?;
        }
        Ok(scenario)
    }
}

fn boost_config(f: &BoostFile) -> Result<BoostConfig, CliError> {
    let c = &f.controller;
    let mode = match c.mode {
        ModeName::Linear => ControllerMode::Linear,
        ModeName::Tanh => {
            let a = c.a.ok_or_else(|| config_err("controller.a", "required in tanh mode"))?;
            let b = c.b.ok_or_else(|| config_err("controller.b", "required in tanh mode"))?;
            ControllerMode::tanh(a, b).map_err(|e| config_err("controller", e))?
        }
    };
    let mut cfg = BoostConfig::new(
        f.params,
        BoostGains {
            kp: c.kp,
            ki: c.ki,
            mode,
            kp_comp: c.kp_comp,
            ki_comp: c.ki_comp,
            phi_min: c.phi_min,
            phi_max: c.phi_max,
        },
    );
    cfg.e_rms_override = c.e_rms_override;
    cfg.derivative_cutoff_hz = c.derivative_cutoff_hz;
    cfg.outer_rate_per_period = c.outer_rate_per_period;
    cfg.diode_clamp = c.diode_clamp;
    Ok(cfg)
}

fn mmc_config(f: &MmcFile) -> MmcConfig {
    let c = &f.controller;
    let mut cfg = MmcConfig::new(f.params, c.kp, c.ki);
    cfg.hpf_cutoff = c.hpf_cutoff;
    cfg.w_sigma_ref = c.w_sigma_ref;
    cfg.w_delta_ref = c.w_delta_ref;
    cfg
}
