//! Averaged interleaved boost rectifier with power-factor correction.
//!
//! States are the total inductor current `i_L` and the output voltage `v_C`;
//! the input `u` is the averaged duty complement. The inner loop is the
//! passive-output PI, the outer loop shapes the current amplitude `φ` from the
//! output-voltage error.

use std::collections::VecDeque;
use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearSystem, Disturbance};
use crate::control::{AntiWindupPi, ControllerMode, ControllerState, PiGains};
use crate::sim::{ClosedLoop, ControlSample, ParamChange};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostParams {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "Vm")]
    pub vm: f64,
    pub f_line: f64,
    pub x2_ref: f64,
}

impl BoostParams {
    /// Bench values: 56 µH, 3047 µF, 22 Ω, 9 V peak at 50 Hz, 15 V output.
    pub fn bench() -> Self {
        Self {
            l: 56e-6,
            c: 3047e-6,
            r: 22.0,
            vm: 9.0,
            f_line: 50.0,
            x2_ref: 15.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L", self.l),
            ("C", self.c),
            ("R", self.r),
            ("Vm", self.vm),
            ("f_line", self.f_line),
            ("x2_ref", self.x2_ref),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Period of the rectified source, `1/(2 f_line)`.
    pub fn rectified_period(&self) -> f64 {
        0.5 / self.f_line
    }
}

pub fn boost_dynamics(x: [f64; 2], u: f64, e: f64, p: &BoostParams) -> [f64; 2] {
    [
        -2.0 / p.l * u * x[1] + 2.0 / p.l * e,
        u * x[0] / p.c - x[1] / (p.r * p.c),
    ]
}

pub fn rectified_source(t: f64, vm: f64, f_line: f64) -> f64 {
    vm * (2.0 * PI * f_line * t).sin().abs()
}

/// Boost model as a bilinear system with constant source `e`.
pub fn boost_system(p: &BoostParams, e: f64) -> Result<BilinearSystem> {
    p.validate()?;
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0 / (p.r * p.c)]);
    let b = DMatrix::from_row_slice(2, 2, &[0.0, -2.0 / p.l, 1.0 / p.c, 0.0]);
    let d = DVector::from_column_slice(&[2.0 * e / p.l, 0.0]);
    BilinearSystem::new(a, vec![b], Disturbance::Constant(d))
}

/// Storage matrix `diag(L/2, C)`.
pub fn boost_certificate_matrix(p: &BoostParams) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&[p.l / 2.0, p.c]))
}

/// Equilibrium `(x★, u★)` for constant source `e` and output voltage `v`.
pub fn boost_equilibrium(p: &BoostParams, e: f64, v: f64) -> Result<([f64; 2], f64)> {
    if !(e > 0.0 && v > 0.0) {
        return Err(Error::param("x2_ref", "equilibrium needs positive source and output"));
    }
    let u = e / v;
    Ok(([v * v / (p.r * e), v], u))
}

/// Passive output `y = x1★ x2 − x2★ x1`.
pub fn boost_output(x_star: [f64; 2], x: [f64; 2]) -> f64 {
    x_star[0] * x[1] - x_star[1] * x[0]
}

/// Sliding RMS over a fixed number of samples.
#[derive(Debug, Clone)]
pub struct RmsWindow {
    len: usize,
    buf: VecDeque<f64>,
    sum: f64,
    fallback: f64,
    since_resum: usize,
}

impl RmsWindow {
    /// `fallback` is returned until the window has filled once.
    pub fn new(len: usize, fallback: f64) -> Self {
        Self {
            len: len.max(1),
            buf: VecDeque::with_capacity(len.max(1)),
            sum: 0.0,
            fallback,
            since_resum: 0,
        }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        let sq = v * v;
        self.buf.push_back(sq);
        self.sum += sq;
        if self.buf.len() > self.len {
            self.sum -= self.buf.pop_front().unwrap_or(0.0);
        }
        self.since_resum += 1;
        // bound the running-sum drift
        if self.since_resum >= self.len {
            self.sum = self.buf.iter().sum();
            self.since_resum = 0;
        }
        self.value()
    }

    pub fn is_warm(&self) -> bool {
        self.buf.len() == self.len
    }

    pub fn value(&self) -> f64 {
        if self.is_warm() {
            (self.sum.max(0.0) / self.len as f64).sqrt()
        } else {
            self.fallback
        }
    }
}

/// Backward difference followed by a first-order low-pass.
#[derive(Debug, Clone)]
pub struct FilteredDerivative {
    cutoff_hz: f64,
    prev: Option<f64>,
    out: f64,
}

impl FilteredDerivative {
    pub fn new(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            prev: None,
            out: 0.0,
        }
    }

    pub fn step(&mut self, v: f64, dt: f64) -> f64 {
        if dt <= 0.0 {
            return self.out;
        }
        let raw = match self.prev {
            Some(p) => (v - p) / dt,
            None => 0.0,
        };
        self.prev = Some(v);
        let tau = 1.0 / (2.0 * PI * self.cutoff_hz);
        let alpha = 1.0 - (-dt / tau).exp();
        self.out += alpha * (raw - self.out);
        self.out
    }

    pub fn value(&self) -> f64 {
        self.out
    }
}

/// Current reference and feedforward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostReference {
    pub x1_star: f64,
    pub x1_star_dot: f64,
    pub u_star: f64,
}

/// `x1★ = E φ / E_rms²`, `u★ = (2E − L ẋ1★)/(2 x2★)`; updates the derivative estimator.
pub fn boost_reference(
    e: f64,
    e_rms: f64,
    phi: f64,
    x2_star: f64,
    deriv: &mut FilteredDerivative,
    dt: f64,
    p: &BoostParams,
) -> Result<BoostReference> {
    if !(x2_star > 0.0) {
        return Err(Error::param("x2_ref", "boost operation needs x2★ > 0"));
    }
    if !(e_rms > 0.0) {
        return Err(Error::param("E_rms", "must be positive"));
    }
    let x1_star = e * phi / (e_rms * e_rms);
    let x1_star_dot = deriv.step(x1_star, dt);
    Ok(BoostReference {
        x1_star,
        x1_star_dot,
        u_star: (2.0 * e - p.l * x1_star_dot) / (2.0 * x2_star),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostGains {
    pub kp: f64,
    pub ki: f64,
    pub mode: ControllerMode,
    pub kp_comp: f64,
    pub ki_comp: f64,
    /// Limits of the outer-loop output `φ` (W).
    pub phi_min: f64,
    pub phi_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub params: BoostParams,
    pub gains: BoostGains,
    /// Constant `E_rms` instead of the sliding window.
    pub e_rms_override: Option<f64>,
    pub derivative_cutoff_hz: f64,
    /// Outer-loop updates per line period.
    pub outer_rate_per_period: f64,
    /// Clamp `i_L ≥ 0` after each step (diode).
    pub diode_clamp: bool,
}

impl BoostConfig {
    pub fn new(params: BoostParams, gains: BoostGains) -> Self {
        Self {
            params,
            gains,
            e_rms_override: None,
            derivative_cutoff_hz: 2000.0,
            outer_rate_per_period: 100.0,
            diode_clamp: true,
        }
    }
}

/// Boost converter in closed loop with the PFC controller.
#[derive(Debug, Clone)]
pub struct BoostLoop {
    cfg: BoostConfig,
    gains: PiGains,
    inner: ControllerState,
    outer: AntiWindupPi,
    rms: Option<RmsWindow>,
    deriv: FilteredDerivative,
    phi: f64,
    step: usize,
}

impl BoostLoop {
    pub fn new(cfg: BoostConfig) -> Result<Self> {
        cfg.params.validate()?;
        let g = &cfg.gains;
        let gains = PiGains::scalar(g.kp, g.ki)?;
        if let ControllerMode::Tanh { a, b } = g.mode {
            ControllerMode::tanh(a, b)?;
        }
        if !(g.kp_comp >= 0.0 && g.ki_comp >= 0.0) {
            return Err(Error::param("kp_comp", "compensator gains must be nonnegative"));
        }
        let outer = AntiWindupPi::new(g.kp_comp, g.ki_comp, g.phi_min, g.phi_max)?;
        if let Some(v) = cfg.e_rms_override {
            if !(v > 0.0) {
                return Err(Error::param("e_rms_override", "must be positive"));
            }
        }
        if !(cfg.derivative_cutoff_hz > 0.0) {
            return Err(Error::param("derivative_cutoff_hz", "must be positive"));
        }
        if !(cfg.outer_rate_per_period >= 1.0) {
            return Err(Error::param("outer_rate_per_period", "must be at least 1"));
        }
        Ok(Self {
            inner: ControllerState::new(1, g.mode),
            deriv: FilteredDerivative::new(cfg.derivative_cutoff_hz),
            phi: g.phi_min.max(0.0),
            outer,
            gains,
            rms: None,
            step: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &BoostConfig {
        &self.cfg
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    fn outer_every(&self, dt: f64) -> usize {
        let ts = 1.0 / (self.cfg.params.f_line * self.cfg.outer_rate_per_period);
        ((ts / dt).round() as usize).max(1)
    }

    fn e_rms(&mut self, e: f64, dt: f64) -> f64 {
        if let Some(v) = self.cfg.e_rms_override {
            return v;
        }
        let p = self.cfg.params;
        let rms = self.rms.get_or_insert_with(|| {
            let len = (p.rectified_period() / dt).round() as usize;
            RmsWindow::new(len, p.vm / SQRT_2)
        });
        rms.push(e)
    }
}

impl ClosedLoop for BoostLoop {
    fn state_names(&self) -> Vec<String> {
        vec!["i_L".into(), "v_C".into()]
    }

    fn input_names(&self) -> Vec<String> {
        vec!["u".into()]
    }

    fn aux_names(&self) -> Vec<String> {
        vec!["E".into(), "E_rms".into(), "phi".into(), "x1_star_dot".into()]
    }

    /// Inductor discharged, capacitor at the source peak.
    fn initial_state(&self) -> Vec<f64> {
        vec![0.0, self.cfg.params.vm]
    }

    fn set_integrator(&mut self, z0: &[f64]) -> Result<()> {
        if z0.len() != 1 {
            return Err(Error::Dimension("boost z0 must have length 1".into()));
        }
        self.inner.z[0] = z0[0];
        Ok(())
    }

    fn control(&mut self, t: f64, x: &[f64], dt: f64, out: &mut ControlSample) -> Result<()> {
        let p = self.cfg.params;
        let e = rectified_source(t, p.vm, p.f_line);
        let e_rms = if dt > 0.0 {
            let e_rms = self.e_rms(e, dt);
            let every = self.outer_every(dt);
            if self.step.is_multiple_of(every) {
                let (phi, _) = self.outer.step(p.x2_ref - x[1], every as f64 * dt);
                self.phi = phi;
            }
            self.step += 1;
            e_rms
        } else {
            self.cfg
                .e_rms_override
                .or_else(|| self.rms.as_ref().map(RmsWindow::value))
                .unwrap_or(p.vm / SQRT_2)
        };

        let r = boost_reference(e, e_rms, self.phi, p.x2_ref, &mut self.deriv, dt, &p)
            .map_err(|err| match err {
                Error::InvalidParameter { reason, .. } => Error::ReferenceInfeasible { t, reason },
                other => other,
            })?;
        out.x_star[0] = r.x1_star;
        out.x_star[1] = p.x2_ref;
        out.u_star[0] = r.u_star;
        out.y[0] = boost_output([r.x1_star, p.x2_ref], [x[0], x[1]]);
        out.z[0] = self.inner.z[0];
        let mut u = [0.0];
        self.inner.step(&self.gains, &out.y, &out.u_star, dt, &mut u);
        out.u[0] = u[0].clamp(0.0, 1.0);
        out.saturated = out.u[0] != u[0];
        out.aux[0] = e;
        out.aux[1] = e_rms;
        out.aux[2] = self.phi;
        out.aux[3] = r.x1_star_dot;
        Ok(())
    }

    fn vector_field(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let p = &self.cfg.params;
        let e = rectified_source(t, p.vm, p.f_line);
        let f = boost_dynamics([x[0], x[1]], u[0], e, p);
        dx.copy_from_slice(&f);
    }

    fn project(&self, x: &mut [f64]) {
        if self.cfg.diode_clamp && x[0] < 0.0 {
            x[0] = 0.0;
        }
    }

    fn apply_event(&mut self, param: &str, change: ParamChange) -> Result<f64> {
        let p = &mut self.cfg.params;
        let slot = match param {
            "L" => &mut p.l,
            "C" => &mut p.c,
            "R" => &mut p.r,
            "Vm" => &mut p.vm,
            "x2_ref" => &mut p.x2_ref,
            other => return Err(Error::param(other, "not an event parameter of boost_pfc")),
        };
        let old = *slot;
        *slot = change.apply(old);
        p.validate()?;
        Ok(old)
    }

    fn storage_matrix(&self) -> Option<DMatrix<f64>> {
        Some(boost_certificate_matrix(&self.cfg.params))
    }

    fn integral_gain(&self) -> Option<DMatrix<f64>> {
        Some(self.gains.ki().clone())
    }
}
