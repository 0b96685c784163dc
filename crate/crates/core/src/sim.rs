//! Fixed-step closed-loop simulation and the passivity monitors.
//!
//! Each integration step samples the controller at `t_k`, holds `u_k` over
//! `[t_k, t_k + dt)` and advances the plant with classical RK4. Parameter
//! events fire at the first sample with `t_k ≥ t_event`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilinear::{
    quadratic_form, rank_of_stack, BilinearSystem, PassiveOutputMap, ReferenceFrame,
    StorageCertificate, DEFAULT_RANK_TOL,
};
use crate::boost::{BoostConfig, BoostLoop};
use crate::control::{ControllerMode, ControllerState, PiGains};
use crate::mmc::{MmcConfig, MmcLoop};
use crate::parallel::{map_indexed, Execution};
use crate::{Error, Result};

/// Divergence guard: abort once `‖x‖` exceeds this multiple of the initial scale.
pub const DIVERGENCE_FACTOR: f64 = 1e9;
/// Relative part of the dissipation/Lyapunov tolerance.
pub const MONITOR_REL_TOL: f64 = 1e-6;
/// Absolute part of the dissipation/Lyapunov tolerance.
pub const MONITOR_ABS_TOL: f64 = 1e-12;

/// How an event mutates its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamChange {
    Set(f64),
    Scale(f64),
}

impl ParamChange {
    pub fn apply(self, old: f64) -> f64 {
        match self {
            ParamChange::Set(v) => v,
            ParamChange::Scale(s) => old * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEvent {
    pub t: f64,
    pub param: String,
    pub change: ParamChange,
}

/// Event as it was applied during a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventMarker {
    /// Sample time at which the mutation took effect.
    pub t: f64,
    pub param: String,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Keep every `record_every`-th integration sample in the trace.
    pub record_every: usize,
    pub events: Vec<ParamEvent>,
}

impl SimConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            record_every: 1,
            events: Vec::new(),
        }
    }

    pub fn record_every(mut self, k: usize) -> Self {
        self.record_every = k;
        self
    }

    pub fn with_event(mut self, ev: ParamEvent) -> Self {
        self.events.push(ev);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("sim.dt", "must be positive"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::param("sim.t_end", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::param("sim.record_every", "must be at least 1"));
        }
        let mut prev = 0.0;
        for (i, ev) in self.events.iter().enumerate() {
            if !(ev.t >= 0.0 && ev.t <= self.t_end) {
                return Err(Error::param(format!("events[{i}].t"), "must lie in [0, t_end]"));
            }
            if ev.t < prev {
                return Err(Error::param(format!("events[{i}].t"), "events must be time-sorted"));
            }
            prev = ev.t;
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Per-sample controller output.
#[derive(Debug, Clone, Default)]
pub struct ControlSample {
    pub u: Vec<f64>,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub y: Vec<f64>,
    /// Integrator state used to produce `u` (before the update).
    pub z: Vec<f64>,
    pub saturated: bool,
    pub aux: Vec<f64>,
}

impl ControlSample {
    pub fn sized(n: usize, m: usize, aux: usize) -> Self {
        Self {
            u: vec![0.0; m],
            x_star: vec![0.0; n],
            u_star: vec![0.0; m],
            y: vec![0.0; m],
            z: vec![0.0; m],
            saturated: false,
            aux: vec![0.0; aux],
        }
    }
}

/// Plant, reference generator and controller bundled for simulation.
pub trait ClosedLoop: Send {
    fn state_names(&self) -> Vec<String>;
    fn input_names(&self) -> Vec<String>;
    fn aux_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn initial_state(&self) -> Vec<f64>;
    fn set_integrator(&mut self, z0: &[f64]) -> Result<()>;
    /// Samples the controller at `t` and advances its internal state by `dt`;
    /// `dt == 0` samples without advancing.
    fn control(&mut self, t: f64, x: &[f64], dt: f64, out: &mut ControlSample) -> Result<()>;
    fn vector_field(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]);
    /// Post-step state projection (e.g. a diode clamp).
    fn project(&self, _x: &mut [f64]) {}
    /// Applies a parameter mutation and returns the previous value.
    fn apply_event(&mut self, param: &str, change: ParamChange) -> Result<f64>;
    /// Storage matrix `P` of `V = ½ x̃ᵀ P x̃`, when the loop has one.
    fn storage_matrix(&self) -> Option<DMatrix<f64>>;
    fn integral_gain(&self) -> Option<DMatrix<f64>>;
}

/// Row-major fixed-width table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    width: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.width..(k + 1) * self.width]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.width).copied().collect()
    }
}

/// Uniformly sampled record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub aux_names: Vec<String>,
    /// Integration step.
    pub dt: f64,
    pub record_every: usize,
    pub t: Vec<f64>,
    pub x: Series,
    pub x_star: Series,
    pub u: Series,
    pub u_star: Series,
    pub y: Series,
    pub z: Series,
    pub aux: Series,
    /// `V(x̃)`, NaN when the loop carries no storage matrix.
    pub v: Vec<f64>,
    /// `W = V + ½ zᵀ Ki z`, NaN without storage or integral gain.
    pub w: Vec<f64>,
    /// Cumulative supply `∫ ũᵀ y dt`, trapezoidal per integration step.
    pub supply: Vec<f64>,
    pub saturated: Vec<bool>,
    pub events: Vec<EventMarker>,
    pub storage: Option<DMatrix<f64>>,
    pub integral_gain: Option<DMatrix<f64>>,
    /// Integration steps whose held input saturated.
    pub saturated_steps: usize,
    pub total_steps: usize,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sample_interval(&self) -> f64 {
        self.dt * self.record_every as f64
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|s| s == name)
    }

    pub fn aux_index(&self, name: &str) -> Option<usize> {
        self.aux_names.iter().position(|s| s == name)
    }

    pub fn state(&self, name: &str) -> Option<Vec<f64>> {
        self.state_index(name).map(|j| self.x.column(j))
    }

    pub fn state_ref(&self, name: &str) -> Option<Vec<f64>> {
        self.state_index(name).map(|j| self.x_star.column(j))
    }

    pub fn aux(&self, name: &str) -> Option<Vec<f64>> {
        self.aux_index(name).map(|j| self.aux.column(j))
    }

    /// Index of the first sample with `t ≥ time`.
    pub fn index_at(&self, time: f64) -> usize {
        let h = self.sample_interval();
        let k = ((time - self.t[0]) / h - 1e-9).ceil().max(0.0) as usize;
        k.min(self.len())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs a closed loop from `x0` under `cfg`.
pub fn simulate<L: ClosedLoop + ?Sized>(
    sys: &mut L,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<SimulationTrace> {
    cfg.validate()?;
    let state_names = sys.state_names();
    let input_names = sys.input_names();
    let aux_names = sys.aux_names();
    let (n, m, na) = (state_names.len(), input_names.len(), aux_names.len());
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("x0", "must be finite"));
    }

    let steps = cfg.steps();
    let cap = steps / cfg.record_every + 1;
    let mut trace = SimulationTrace {
        state_names,
        input_names,
        aux_names,
        dt: cfg.dt,
        record_every: cfg.record_every,
        t: Vec::with_capacity(cap),
        x: Series::new(n),
        x_star: Series::new(n),
        u: Series::new(m),
        u_star: Series::new(m),
        y: Series::new(m),
        z: Series::new(m),
        aux: Series::new(na),
        v: Vec::with_capacity(cap),
        w: Vec::with_capacity(cap),
        supply: Vec::with_capacity(cap),
        saturated: Vec::with_capacity(cap),
        events: Vec::new(),
        storage: sys.storage_matrix(),
        integral_gain: sys.integral_gain(),
        saturated_steps: 0,
        total_steps: steps,
    };

    let dt = cfg.dt;
    let scale = norm(x0).max(1.0);
    let mut x = x0.to_vec();
    let mut xtmp = vec![0.0; n];
    let mut xt = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut sample = ControlSample::sized(n, m, na);
    let mut prev_u_tilde = vec![0.0; m];
    let mut prev_y = vec![0.0; m];
    let mut supply = 0.0;
    let mut next_event = 0;

    for k in 0..=steps {
        let t = k as f64 * dt;

        while next_event < cfg.events.len() && cfg.events[next_event].t <= t + 1e-12 * dt {
            let ev = &cfg.events[next_event];
            let old = sys.apply_event(&ev.param, ev.change)?;
            trace.events.push(EventMarker {
                t,
                param: ev.param.clone(),
                old,
                new: ev.change.apply(old),
            });
            // storage can depend on parameters (e.g. MMC inductances)
            trace.storage = sys.storage_matrix();
            next_event += 1;
        }

        // the last sample is read-only so a run can be continued seamlessly
        let advance = if k == steps { 0.0 } else { dt };
        sys.control(t, &x, advance, &mut sample)?;

        if k > 0 {
            let s: f64 = prev_u_tilde
                .iter()
                .zip(prev_y.iter().zip(&sample.y))
                .map(|(ut, (y0, y1))| ut * (y0 + y1))
                .sum();
            supply += 0.5 * dt * s;
        }
        for (ut, (u, us)) in prev_u_tilde.iter_mut().zip(sample.u.iter().zip(&sample.u_star)) {
            *ut = u - us;
        }
        prev_y.copy_from_slice(&sample.y);
        if sample.saturated && k < steps {
            trace.saturated_steps += 1;
        }

        if k % cfg.record_every == 0 {
            for i in 0..n {
                xtmp[i] = x[i] - sample.x_star[i];
            }
            let v = trace
                .storage
                .as_ref()
                .map(|p| 0.5 * quadratic_form(p, &xtmp))
                .unwrap_or(f64::NAN);
            let w = trace
                .integral_gain
                .as_ref()
                .map(|ki| v + 0.5 * quadratic_form(ki, &sample.z))
                .unwrap_or(f64::NAN);
            trace.t.push(t);
            trace.x.push(&x);
            trace.x_star.push(&sample.x_star);
            trace.u.push(&sample.u);
            trace.u_star.push(&sample.u_star);
            trace.y.push(&sample.y);
            trace.z.push(&sample.z);
            trace.aux.push(&sample.aux);
            trace.v.push(v);
            trace.w.push(w);
            trace.supply.push(supply);
            trace.saturated.push(sample.saturated);
        }

        if k == steps {
            break;
        }

        // RK4 with the input held over the step
        let u = &sample.u;
        sys.vector_field(t, &x, u, &mut k1);
        for i in 0..n {
            xt[i] = x[i] + 0.5 * dt * k1[i];
        }
        sys.vector_field(t + 0.5 * dt, &xt, u, &mut k2);
        for i in 0..n {
            xt[i] = x[i] + 0.5 * dt * k2[i];
        }
        sys.vector_field(t + 0.5 * dt, &xt, u, &mut k3);
        for i in 0..n {
            xt[i] = x[i] + dt * k3[i];
        }
        sys.vector_field(t + dt, &xt, u, &mut k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        sys.project(&mut x);

        if x.iter().any(|v| !v.is_finite()) || norm(&x) > DIVERGENCE_FACTOR * scale {
            return Err(Error::Divergence { t: t + dt });
        }
    }
    Ok(trace)
}

/// Monitors to evaluate after a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorToggles {
    pub dissipation: bool,
    pub lyapunov: bool,
    pub augmented_output: bool,
}

impl Default for MonitorToggles {
    fn default() -> Self {
        Self {
            dissipation: true,
            lyapunov: true,
            augmented_output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plant", rename_all = "snake_case")]
pub enum PlantConfig {
    #[serde(rename = "boost_pfc")]
    Boost(BoostConfig),
    Mmc(MmcConfig),
}

impl PlantConfig {
    pub fn id(&self) -> &'static str {
        match self {
            PlantConfig::Boost(_) => "boost_pfc",
            PlantConfig::Mmc(_) => "mmc",
        }
    }

    pub fn build(&self) -> Result<Box<dyn ClosedLoop>> {
        Ok(match self {
            PlantConfig::Boost(c) => Box::new(BoostLoop::new(c.clone())?),
            PlantConfig::Mmc(c) => Box::new(MmcLoop::new(c.clone())?),
        })
    }
}

/// A complete, plant-resolved simulation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub plant: PlantConfig,
    pub sim: SimConfig,
    pub x0: Option<Vec<f64>>,
    pub z0: Option<Vec<f64>>,
    pub monitors: MonitorToggles,
}

impl Scenario {
    pub fn new(plant: PlantConfig, sim: SimConfig) -> Self {
        Self {
            plant,
            sim,
            x0: None,
            z0: None,
            monitors: MonitorToggles::default(),
        }
    }
}

pub fn run_closed_loop(scenario: &Scenario) -> Result<SimulationTrace> {
    let mut lp = scenario.plant.build()?;
    if let Some(z0) = &scenario.z0 {
        lp.set_integrator(z0)?;
    }
    let x0 = scenario.x0.clone().unwrap_or_else(|| lp.initial_state());
    simulate(lp.as_mut(), &x0, &scenario.sim)
}

/// Runs independent scenarios, in parallel when requested and available.
pub fn run_batch(scenarios: &[Scenario], exec: Execution) -> Vec<Result<SimulationTrace>> {
    map_indexed(scenarios.len(), exec, |i| run_closed_loop(&scenarios[i]))
}

/// Sum of sinusoids per input channel, used as an open-loop excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalInput {
    /// `(amplitude, angular frequency, phase)` per component, per channel.
    pub channels: Vec<Vec<(f64, f64, f64)>>,
}

impl SinusoidalInput {
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        for (o, ch) in out.iter_mut().zip(&self.channels) {
            *o = ch.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum();
        }
    }
}

/// Input policy of a [`BilinearLoop`].
#[derive(Debug, Clone)]
pub enum Drive {
    /// The tracking PI (linear or `tanh`).
    Pi { gains: PiGains, state: ControllerState },
    /// `u = u★ + ũ(t)` with a prescribed excitation.
    OpenLoop(SinusoidalInput),
}

impl Drive {
    pub fn pi(gains: PiGains, mode: ControllerMode) -> Self {
        let m = gains.m();
        Drive::Pi {
            gains,
            state: ControllerState::new(m, mode),
        }
    }
}

enum LoopReference {
    Constant { x_star: Vec<f64>, u_star: Vec<f64> },
    Dynamic(Box<dyn ReferenceFrame + Send>),
}

/// Generic bilinear plant in closed loop with the passive-output PI.
pub struct BilinearLoop {
    sys: BilinearSystem,
    p: DMatrix<f64>,
    output: PassiveOutputMap,
    reference: LoopReference,
    drive: Drive,
    x0: Vec<f64>,
}

impl BilinearLoop {
    /// `p` defines both the passive output and the storage; it need not be a
    /// valid certificate (useful for negative controls).
    pub fn new(sys: BilinearSystem, p: DMatrix<f64>, drive: Drive) -> Result<Self> {
        let n = sys.n();
        if p.shape() != (n, n) {
            return Err(Error::Dimension("P does not match the system".into()));
        }
        if let Drive::Pi { gains, .. } = &drive {
            if gains.m() != sys.m() {
                return Err(Error::Dimension("gain size does not match m".into()));
            }
        }
        let output = PassiveOutputMap::new(&p, sys.b());
        Ok(Self {
            reference: LoopReference::Constant {
                x_star: vec![0.0; n],
                u_star: vec![0.0; sys.m()],
            },
            x0: vec![0.0; n],
            sys,
            p,
            output,
            drive,
        })
    }

    pub fn from_certificate(sys: BilinearSystem, cert: &StorageCertificate, drive: Drive) -> Result<Self> {
        Self::new(sys, cert.p().clone(), drive)
    }

    pub fn with_constant_reference(mut self, x_star: Vec<f64>, u_star: Vec<f64>) -> Self {
        self.x0 = x_star.clone();
        self.reference = LoopReference::Constant { x_star, u_star };
        self
    }

    pub fn with_reference(mut self, reference: Box<dyn ReferenceFrame + Send>) -> Self {
        self.x0 = reference.sample(0.0).x_star.as_slice().to_vec();
        self.reference = LoopReference::Dynamic(reference);
        self
    }

    pub fn system(&self) -> &BilinearSystem {
        &self.sys
    }
}

impl ClosedLoop for BilinearLoop {
    fn state_names(&self) -> Vec<String> {
        (1..=self.sys.n()).map(|i| format!("x{i}")).collect()
    }

    fn input_names(&self) -> Vec<String> {
        (1..=self.sys.m()).map(|i| format!("u{i}")).collect()
    }

    fn initial_state(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn set_integrator(&mut self, z0: &[f64]) -> Result<()> {
        match &mut self.drive {
            Drive::Pi { state, .. } if state.z.len() == z0.len() => {
                state.z.copy_from_slice(z0);
                Ok(())
            }
            Drive::Pi { .. } => Err(Error::Dimension("z0 length does not match m".into())),
            Drive::OpenLoop(_) => Ok(()),
        }
    }

    fn control(&mut self, t: f64, x: &[f64], dt: f64, out: &mut ControlSample) -> Result<()> {
        match &self.reference {
            LoopReference::Constant { x_star, u_star } => {
                out.x_star.copy_from_slice(x_star);
                out.u_star.copy_from_slice(u_star);
            }
            LoopReference::Dynamic(r) => {
                let pt = r.sample(t);
                out.x_star.copy_from_slice(pt.x_star.as_slice());
                out.u_star.copy_from_slice(pt.u_star.as_slice());
            }
        }
        self.output.eval_into(&out.x_star, x, &mut out.y);
        match &mut self.drive {
            Drive::Pi { gains, state } => {
                out.z.copy_from_slice(&state.z);
                state.step(gains, &out.y, &out.u_star, dt, &mut out.u);
            }
            Drive::OpenLoop(sig) => {
                sig.eval(t, &mut out.u);
                for (u, us) in out.u.iter_mut().zip(&out.u_star) {
                    *u += us;
                }
            }
        }
        out.saturated = false;
        Ok(())
    }

    fn vector_field(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) {
        self.sys.vector_field(t, x, u, dx);
    }

    fn apply_event(&mut self, param: &str, _change: ParamChange) -> Result<f64> {
        Err(Error::param(param, "generic bilinear loops have no named parameters"))
    }

    fn storage_matrix(&self) -> Option<DMatrix<f64>> {
        Some(self.p.clone())
    }

    fn integral_gain(&self) -> Option<DMatrix<f64>> {
        match &self.drive {
            Drive::Pi { gains, .. } => Some(gains.ki().clone()),
            Drive::OpenLoop(_) => None,
        }
    }
}

/// Outcome of checking `ΔV ≤ ∫ ũᵀ y dt` interval by interval.
#[derive(Debug, Clone, Serialize)]
pub struct DissipationReport {
    /// Largest `ΔV − ∫ũᵀy` over all intervals (positive means excess).
    pub max_excess: f64,
    pub tolerance: f64,
    pub violations: usize,
    pub worst_time: f64,
    /// `∫ũᵀy − ΔV` per interval.
    #[serde(skip)]
    pub margins: Vec<f64>,
    /// Largest `|V_trace − ½x̃ᵀPx̃|` (bookkeeping cross-check).
    pub storage_mismatch: f64,
}

impl DissipationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn x_tilde(trace: &SimulationTrace, k: usize, buf: &mut [f64]) {
    for ((b, x), xs) in buf.iter_mut().zip(trace.x.row(k)).zip(trace.x_star.row(k)) {
        *b = x - xs;
    }
}

/// Checks the dissipation inequality along a trace with storage `P`.
///
/// `V` is recomputed from `x`, `x★` and `P`. For undecimated traces the supply
/// integral is rebuilt from the recorded `ũ` and `y` by the trapezoid rule;
/// decimated traces fall back to the per-step supply accumulated by the
/// engine. Tolerance: `1e-6 · max V + 1e-12`.
pub fn dissipation_check(trace: &SimulationTrace, p: &DMatrix<f64>) -> DissipationReport {
    let n = trace.x.width();
    let mut buf = vec![0.0; n];
    let v: Vec<f64> = (0..trace.len())
        .map(|k| {
            x_tilde(trace, k, &mut buf);
            0.5 * quadratic_form(p, &buf)
        })
        .collect();
    let storage_mismatch = v
        .iter()
        .zip(&trace.v)
        .map(|(a, b)| (a - b).abs())
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max);
    let v_max = v.iter().copied().fold(0.0, f64::max);
    let tolerance = MONITOR_REL_TOL * v_max + MONITOR_ABS_TOL;

    let mut margins = Vec::with_capacity(trace.len().saturating_sub(1));
    let (mut max_excess, mut worst_time, mut violations) = (f64::NEG_INFINITY, 0.0, 0);
    for k in 0..trace.len().saturating_sub(1) {
        let supplied = if trace.record_every == 1 {
            let (u, us, y0, y1) = (trace.u.row(k), trace.u_star.row(k), trace.y.row(k), trace.y.row(k + 1));
            let s: f64 = (0..u.len()).map(|i| (u[i] - us[i]) * (y0[i] + y1[i])).sum();
            0.5 * trace.dt * s
        } else {
            trace.supply[k + 1] - trace.supply[k]
        };
        let excess = v[k + 1] - v[k] - supplied;
        margins.push(-excess);
        if excess > max_excess {
            max_excess = excess;
            worst_time = trace.t[k];
        }
        if excess > tolerance {
            violations += 1;
        }
    }
    DissipationReport {
        max_excess: if margins.is_empty() { 0.0 } else { max_excess },
        tolerance,
        violations,
        worst_time,
        margins,
        storage_mismatch,
    }
}

/// `W(x̃, z) = V(x̃) + ½ zᵀ Ki z` along a trace and its largest single-step rise.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    #[serde(skip)]
    pub w: Vec<f64>,
    pub w0: f64,
    pub w_final: f64,
    pub max_increase: f64,
    pub worst_time: f64,
    /// `1e-6 · W(0) + 1e-12`.
    pub tolerance: f64,
}

impl LyapunovReport {
    pub fn non_increasing(&self) -> bool {
        self.max_increase <= self.tolerance
    }
}

pub fn lyapunov_monitor(trace: &SimulationTrace, p: &DMatrix<f64>, ki: &DMatrix<f64>) -> LyapunovReport {
    let n = trace.x.width();
    let mut buf = vec![0.0; n];
    let w: Vec<f64> = (0..trace.len())
        .map(|k| {
            x_tilde(trace, k, &mut buf);
            0.5 * quadratic_form(p, &buf) + 0.5 * quadratic_form(ki, trace.z.row(k))
        })
        .collect();
    let (mut max_increase, mut worst_time) = (f64::NEG_INFINITY, 0.0);
    for k in 1..w.len() {
        let d = w[k] - w[k - 1];
        if d > max_increase {
            max_increase = d;
            worst_time = trace.t[k - 1];
        }
    }
    let w0 = w.first().copied().unwrap_or(0.0);
    LyapunovReport {
        w0,
        w_final: w.last().copied().unwrap_or(0.0),
        max_increase: if w.len() > 1 { max_increase } else { 0.0 },
        worst_time,
        tolerance: MONITOR_REL_TOL * w0 + MONITOR_ABS_TOL,
        w,
    }
}

/// `‖y_a(t)‖` with `y_a = [C(x★); Q^{1/2}] x̃`, plus the rank diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct AugmentedOutputReport {
    #[serde(skip)]
    pub norms: Vec<f64>,
    #[serde(skip)]
    pub min_singular_values: Vec<f64>,
    pub initial_norm: f64,
    pub final_norm: f64,
    /// Smallest numerical rank met along the trace.
    pub min_rank: usize,
    /// Times where the stacked matrix is rank deficient or `σ_min` dips to
    /// an isolated near-zero minimum.
    pub rank_deficient_times: Vec<f64>,
}

/// Local minima of `σ_min` below this fraction of its median are flagged.
const RANK_DIP_FRACTION: f64 = 0.05;

pub fn augmented_output_series(
    trace: &SimulationTrace,
    cert: &StorageCertificate,
) -> Result<AugmentedOutputReport> {
    let (_, q_sqrt) = cert.require_valid()?;
    let map = cert.output_map();
    let n = trace.x.width();
    let mut buf = vec![0.0; n];
    let mut norms = Vec::with_capacity(trace.len());
    let mut sig = Vec::with_capacity(trace.len());
    let mut ranks = Vec::with_capacity(trace.len());
    for k in 0..trace.len() {
        x_tilde(trace, k, &mut buf);
        let xs = trace.x_star.row(k);
        let rep = rank_of_stack(map.c_matrix(xs), q_sqrt, DEFAULT_RANK_TOL);
        let ya = &rep.matrix * DVector::from_column_slice(&buf);
        norms.push(ya.norm());
        sig.push(rep.min_singular_value);
        ranks.push(rep.rank);
    }
    let mut sorted = sig.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    let mut flagged = Vec::new();
    for k in 0..sig.len() {
        let deficient = ranks[k] < n;
        let dip = k > 0
            && k + 1 < sig.len()
            && sig[k] <= sig[k - 1]
            && sig[k] < sig[k + 1]
            && sig[k] < RANK_DIP_FRACTION * median;
        if deficient || dip {
            flagged.push(trace.t[k]);
        }
    }
    Ok(AugmentedOutputReport {
        initial_norm: norms.first().copied().unwrap_or(0.0),
        final_norm: norms.last().copied().unwrap_or(0.0),
        min_rank: ranks.iter().copied().min().unwrap_or(0),
        rank_deficient_times: flagged,
        norms,
        min_singular_values: sig,
    })
}
