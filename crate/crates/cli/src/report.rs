//! Metric summaries of a finished run.

use pbtrack_core::bilinear::{verify_storage_certificate, DEFAULT_CERT_TOL};
use pbtrack_core::boost::boost_system;
use pbtrack_core::metrics::{
    component_error, mean, power_factor, rms, thd, tracking_error_series, Component, SteadyWindow, TrackingSpec,
};
use pbtrack_core::mmc::{grid_current_phasor, mmc_system};
use pbtrack_core::sim::{
    augmented_output_series, dissipation_check, lyapunov_monitor, DissipationReport, EventMarker, LyapunovReport,
    Scenario, SimulationTrace,
};
use serde::Serialize;

use crate::config::{BoostFile, MmcFile, ScenarioSpec};
use crate::CliError;

/// Flagged rank-test instants listed individually in the summary.
const LISTED_RANK_FLAGS: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub plant: &'static str,
    pub runtime_s: f64,
    pub integration_steps: usize,
    pub samples: usize,
    pub sample_interval: f64,
    pub saturation: Saturation,
    pub events: Vec<EventMarker>,
    pub monitors: Monitors,
    pub metrics: PlantMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Saturation {
    pub steps: usize,
    pub total: usize,
    pub fraction: f64,
    /// Fraction of saturated samples inside the steady window.
    pub steady_fraction: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Monitors {
    pub dissipation: Option<DissipationReport>,
    pub lyapunov: Option<LyapunovReport>,
    pub augmented_output: Option<AugmentedSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentedSummary {
    pub initial_norm: f64,
    pub final_norm: f64,
    pub min_rank: usize,
    pub flagged_instants: usize,
    pub first_flagged: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum PlantMetrics {
    Boost(BoostMetricsReport),
    Mmc(MmcMetricsReport),
}

#[derive(Debug, Clone, Serialize)]
pub struct BoostMetricsReport {
    pub window: (f64, f64),
    pub power_factor: f64,
    /// Rectified inductor current against the rectified-line fundamental.
    pub thd: f64,
    /// Inductor current unfolded to the AC side, against the line fundamental.
    pub thd_line: f64,
    pub harmonics: usize,
    pub v_c_mean: f64,
    pub v_c_ripple_pp: f64,
    /// Half-width of the output band (V).
    pub band: f64,
    pub settling_time: Option<f64>,
    pub settled_by_target: Option<bool>,
    pub recoveries: Vec<Recovery>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Recovery {
    pub t: f64,
    pub param: String,
    /// Time from the event until the smoothed output stays in band.
    pub recovery_time: Option<f64>,
    pub within_target: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MmcMetricsReport {
    pub window: (f64, f64),
    pub i_v_amplitude: f64,
    pub i_v_rms_error: f64,
    pub i_v_relative_error: f64,
    pub u_cu_relative_error: f64,
    pub u_cl_relative_error: f64,
    pub i_v_within_band: bool,
    pub u_c_within_band: bool,
    pub i_diff_mean: f64,
    pub overmodulation_fraction: f64,
}

fn numeric(e: pbtrack_core::Error) -> CliError {
    CliError::Numeric(e.to_string())
}

fn column(trace: &SimulationTrace, name: &str) -> Result<Vec<f64>, CliError> {
    trace
        .state(name)
        .or_else(|| trace.aux(name))
        .ok_or_else(|| CliError::Numeric(format!("trace has no column `{name}`")))
}

pub fn summarize(
    spec: &ScenarioSpec,
    scenario: &Scenario,
    trace: &SimulationTrace,
    runtime_s: f64,
) -> Result<Summary, CliError> {
    let (metrics, window) = match spec {
        ScenarioSpec::Boost(f) => {
            let (m, w) = boost_metrics(f, trace)?;
            (PlantMetrics::Boost(m), w)
        }
        ScenarioSpec::Mmc(f) => {
            let (m, w) = mmc_metrics(f, trace)?;
            (PlantMetrics::Mmc(m), w)
        }
    };
    let steady = &trace.saturated[window.start..window.start + window.len];
    let saturation = Saturation {
        steps: trace.saturated_steps,
        total: trace.total_steps,
        fraction: trace.saturated_steps as f64 / trace.total_steps.max(1) as f64,
        steady_fraction: steady.iter().filter(|s| **s).count() as f64 / steady.len().max(1) as f64,
    };
    Ok(Summary {
        plant: spec.plant_id(),
        runtime_s,
        integration_steps: trace.total_steps,
        samples: trace.len(),
        sample_interval: trace.sample_interval(),
        saturation,
        events: trace.events.clone(),
        monitors: monitors(spec, scenario, trace)?,
        metrics,
    })
}

fn monitors(spec: &ScenarioSpec, scenario: &Scenario, trace: &SimulationTrace) -> Result<Monitors, CliError> {
    let mut out = Monitors::default();
    let Some(p) = trace.storage.as_ref() else {
        return Ok(out);
    };
    let toggles = scenario.monitors;
    if toggles.dissipation {
        out.dissipation = Some(dissipation_check(trace, p));
    }
    if toggles.lyapunov {
        if let Some(ki) = trace.integral_gain.as_ref() {
            out.lyapunov = Some(lyapunov_monitor(trace, p, ki));
        }
    }
    if toggles.augmented_output {
        let sys = match spec {
            ScenarioSpec::Boost(f) => boost_system(&f.params, 0.0),
            ScenarioSpec::Mmc(f) => mmc_system(&f.params),
        }
        .map_err(numeric)?;
        let cert = verify_storage_certificate(&sys, p, DEFAULT_CERT_TOL).map_err(numeric)?;
        let rep = augmented_output_series(trace, &cert).map_err(numeric)?;
        out.augmented_output = Some(AugmentedSummary {
            initial_norm: rep.initial_norm,
            final_norm: rep.final_norm,
            min_rank: rep.min_rank,
            flagged_instants: rep.rank_deficient_times.len(),
            first_flagged: rep.rank_deficient_times.iter().take(LISTED_RANK_FLAGS).copied().collect(),
        });
    }
    Ok(out)
}

fn boost_metrics(f: &BoostFile, trace: &SimulationTrace) -> Result<(BoostMetricsReport, SteadyWindow), CliError> {
    let m = &f.metrics;
    let f_line = f.params.f_line;
    let rect = SteadyWindow::last_periods(trace, 2.0 * f_line, 2 * m.steady_periods).map_err(numeric)?;
    let line = SteadyWindow::last_periods(trace, f_line, m.steady_periods).map_err(numeric)?;
    let i_l = column(trace, "i_L")?;
    let e = column(trace, "E")?;
    let v_c = column(trace, "v_C")?;
    let pf = power_factor(rect.slice(&e).map_err(numeric)?, rect.slice(&i_l).map_err(numeric)?).map_err(numeric)?;
    let thd_rect = thd(&i_l, &rect, m.harmonics).map_err(numeric)?;
    let w = 2.0 * std::f64::consts::PI * f_line;
    let unfolded: Vec<f64> = trace
        .t
        .iter()
        .zip(&i_l)
        .map(|(t, i)| if (w * t).sin() < 0.0 { -i } else { *i })
        .collect();
    let thd_line = thd(&unfolded, &line, m.harmonics).map_err(numeric)?;
    let steady_vc = rect.slice(&v_c).map_err(numeric)?;
    let ripple = steady_vc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - steady_vc.iter().copied().fold(f64::INFINITY, f64::min);

    // Output-band checks per segment between events; the target follows x2_ref events.
    let band = m.band * f.params.x2_ref;
    let smoothing = (m.smoothing / trace.sample_interval()).round().max(1.0) as usize;
    let mut target = f.params.x2_ref;
    let segment = |from: f64, to: f64, target: f64| {
        let k1 = if to >= trace.t[trace.len() - 1] { trace.len() } else { trace.index_at(to) };
        let err: Vec<f64> = v_c[..k1].iter().map(|v| target - v).collect();
        let spec = TrackingSpec {
            window: (from, to),
            band: m.band * target,
            smoothing,
            settle_from: from,
        };
        tracking_error_series(&trace.t[..k1], &err, &spec).settling_time
    };
    let t_end = trace.t[trace.len() - 1];
    let first_event = trace.events.first().map_or(t_end, |e| e.t);
    let settling_time = segment(0.0, first_event, target);
    let mut recoveries = Vec::new();
    for (i, ev) in trace.events.iter().enumerate() {
        if ev.param == "x2_ref" {
            target = ev.new;
        }
        let to = trace.events.get(i + 1).map_or(t_end, |e| e.t);
        let recovery_time = segment(ev.t, to, target);
        recoveries.push(Recovery {
            t: ev.t,
            param: ev.param.clone(),
            recovery_time,
            within_target: m.recover_within.map(|lim| recovery_time.is_some_and(|r| r <= lim)),
        });
    }
    let report = BoostMetricsReport {
        window: (rect.start_time(), rect.end_time()),
        power_factor: pf,
        thd: thd_rect,
        thd_line,
        harmonics: m.harmonics,
        v_c_mean: mean(steady_vc),
        v_c_ripple_pp: ripple,
        band,
        settling_time,
        settled_by_target: m.settle_by.map(|lim| settling_time.is_some_and(|s| s <= lim)),
        recoveries,
    };
    Ok((report, rect))
}

fn mmc_metrics(f: &MmcFile, trace: &SimulationTrace) -> Result<(MmcMetricsReport, SteadyWindow), CliError> {
    let m = &f.metrics;
    let win = SteadyWindow::last_periods(trace, f.params.f, m.steady_periods).map_err(numeric)?;
    let iv_idx = trace
        .state_index("i_v")
        .ok_or_else(|| CliError::Numeric("trace has no column `i_v`".into()))?;
    let iv_err = component_error(trace, Component::State(iv_idx)).map_err(numeric)?;
    let amplitude = grid_current_phasor(&f.params).amplitude;
    let iv_rms = rms(win.slice(&iv_err).map_err(numeric)?);
    let arm = |value: &str, reference: &str| -> Result<f64, CliError> {
        let comp = Component::Aux {
            value: trace.aux_index(value).ok_or_else(|| CliError::Numeric(format!("no column `{value}`")))?,
            reference: trace
                .aux_index(reference)
                .ok_or_else(|| CliError::Numeric(format!("no column `{reference}`")))?,
        };
        let err = component_error(trace, comp).map_err(numeric)?;
        let r = column(trace, reference)?;
        Ok(rms(win.slice(&err).map_err(numeric)?) / rms(win.slice(&r).map_err(numeric)?))
    };
    let u_cu = arm("u_CU", "u_CU_ref")?;
    let u_cl = arm("u_CL", "u_CL_ref")?;
    let i_diff = column(trace, "i_diff")?;
    let overmod = column(trace, "overmod")?;
    let iv_rel = iv_rms / amplitude;
    let report = MmcMetricsReport {
        window: (win.start_time(), win.end_time()),
        i_v_amplitude: amplitude,
        i_v_rms_error: iv_rms,
        i_v_relative_error: iv_rel,
        u_cu_relative_error: u_cu,
        u_cl_relative_error: u_cl,
        i_v_within_band: iv_rel <= m.i_v_band,
        u_c_within_band: u_cu <= m.u_c_band && u_cl <= m.u_c_band,
        i_diff_mean: mean(win.slice(&i_diff).map_err(numeric)?),
        overmodulation_fraction: mean(win.slice(&overmod).map_err(numeric)?),
    };
    Ok((report, win))
}
