//! Single-phase averaged modular multilevel converter.
//!
//! States: circulating current `i_diff`, grid current `i_v`, and the sum and
//! difference of the arm capacitor voltages `u_CΣ = u_CU + u_CL`,
//! `u_CΔ = u_CU − u_CL`. Inputs are the sum and difference of the arm
//! insertion indexes. The point of common coupling is grounded.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearSystem, Disturbance};
use crate::control::{ControllerMode, ControllerState, PiGains};
use crate::sim::{ClosedLoop, ControlSample, ParamChange};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmcParams {
    /// Arm resistance (Ω).
    #[serde(rename = "R")]
    pub r: f64,
    /// Arm inductance (H).
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "R_load")]
    pub r_load: f64,
    #[serde(rename = "L_load")]
    pub l_load: f64,
    /// Submodule capacitance (F).
    #[serde(rename = "C")]
    pub c: f64,
    /// Submodules per arm.
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "V_dc")]
    pub v_dc: f64,
    pub e_amp: f64,
    /// Grid frequency (Hz).
    pub f: f64,
}

impl MmcParams {
    /// Laboratory values: 2×5 submodules of 3.3 mF, 8 Ω / 10 mH arms,
    /// 6 Ω / 20 mH load, 150 V DC link, 75 V at 50 Hz.
    pub fn lab() -> Self {
        Self {
            r: 8.0,
            l: 0.01,
            r_load: 6.0,
            l_load: 0.02,
            c: 3.3e-3,
            n: 5,
            v_dc: 150.0,
            e_amp: 75.0,
            f: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("R", self.r),
            ("L", self.l),
            ("R_load", self.r_load),
            ("L_load", self.l_load),
            ("C", self.c),
            ("V_dc", self.v_dc),
            ("f", self.f),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if self.n == 0 {
            return Err(Error::param("N", "must be positive"));
        }
        if !(self.e_amp >= 0.0 && self.e_amp <= 0.5 * self.v_dc) {
            return Err(Error::param("e_amp", "must lie in [0, V_dc/2]"));
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f
    }

    /// `R' = R/2 + R_load`.
    pub fn r_prime(&self) -> f64 {
        0.5 * self.r + self.r_load
    }

    /// `L' = L/2 + L_load`.
    pub fn l_prime(&self) -> f64 {
        0.5 * self.l + self.l_load
    }

    /// Arm-equivalent capacitance `C/N`.
    pub fn c_prime(&self) -> f64 {
        self.c / self.n as f64
    }
}

pub fn mmc_dynamics(x: [f64; 4], u: [f64; 2], p: &MmcParams) -> [f64; 4] {
    let (lp, cp) = (p.l_prime(), p.c_prime());
    [
        -p.r / p.l * x[0] - x[2] * u[0] / (4.0 * p.l) - x[3] * u[1] / (4.0 * p.l) + p.v_dc / (2.0 * p.l),
        -p.r_prime() / lp * x[1] - x[3] * u[0] / (4.0 * lp) - x[2] * u[1] / (4.0 * lp),
        x[0] * u[0] / cp + x[1] * u[1] / (2.0 * cp),
        x[1] * u[0] / (2.0 * cp) + x[0] * u[1] / cp,
    ]
}

pub fn mmc_system(p: &MmcParams) -> Result<BilinearSystem> {
    p.validate()?;
    let (l, lp, cp) = (p.l, p.l_prime(), p.c_prime());
    let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[-p.r / l, -p.r_prime() / lp, 0.0, 0.0]));
    let mut b1 = DMatrix::zeros(4, 4);
    b1[(0, 2)] = -1.0 / (4.0 * l);
    b1[(1, 3)] = -1.0 / (4.0 * lp);
    b1[(2, 0)] = 1.0 / cp;
    b1[(3, 1)] = 1.0 / (2.0 * cp);
    let mut b2 = DMatrix::zeros(4, 4);
    b2[(0, 3)] = -1.0 / (4.0 * l);
    b2[(1, 2)] = -1.0 / (4.0 * lp);
    b2[(2, 1)] = 1.0 / (2.0 * cp);
    b2[(3, 0)] = 1.0 / cp;
    let d = DVector::from_column_slice(&[p.v_dc / (2.0 * l), 0.0, 0.0, 0.0]);
    BilinearSystem::new(a, vec![b1, b2], Disturbance::Constant(d))
}

/// Storage matrix `diag(2L, L', C'/2, C'/2)`.
pub fn mmc_certificate_matrix(p: &MmcParams) -> DMatrix<f64> {
    let cp = p.c_prime();
    DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0 * p.l, p.l_prime(), 0.5 * cp, 0.5 * cp]))
}

/// Passive output for the storage `diag(2L, L', C'/2, C'/2)`.
pub fn mmc_output(xs: &[f64], x: &[f64]) -> [f64; 2] {
    [
        0.5 * (xs[0] * x[2] - x[0] * xs[2] + 0.5 * xs[1] * x[3] - 0.5 * x[1] * xs[3]),
        0.5 * (xs[0] * x[3] - x[0] * xs[3] + 0.5 * xs[1] * x[2] - 0.5 * x[1] * xs[2]),
    ]
}

/// `x1★² − ¼ x2★²`; the tracking rank test fails where this vanishes.
pub fn rank_margin(x1_star: f64, x2_star: f64) -> f64 {
    x1_star * x1_star - 0.25 * x2_star * x2_star
}

/// Steady-state grid current `amplitude · sin(ωt − phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Phasor {
    pub amplitude: f64,
    pub phase: f64,
}

pub fn grid_current_phasor(p: &MmcParams) -> Phasor {
    let x = p.omega() * p.l_prime();
    let r = p.r_prime();
    Phasor {
        amplitude: p.e_amp / r.hypot(x),
        phase: x.atan2(r),
    }
}

pub fn grid_current_ref(t: f64, p: &MmcParams) -> f64 {
    let ph = grid_current_phasor(p);
    ph.amplitude * (p.omega() * t - ph.phase).sin()
}

pub fn emf_ref(t: f64, p: &MmcParams) -> f64 {
    p.e_amp * (p.omega() * t).sin()
}

/// Constant circulating-current reference from the mean AC power, and the
/// matching differential voltage `R · x1★`.
pub fn circulating_current_ref(p: &MmcParams) -> (f64, f64) {
    let ph = grid_current_phasor(p);
    let x1 = 0.5 * p.e_amp * ph.amplitude * ph.phase.cos() / p.v_dc;
    (x1, p.r * x1)
}

/// Discrete first-order high-pass `y_k = a (y_{k−1} + x_k − x_{k−1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighPass {
    cutoff_hz: f64,
    prev_in: f64,
    out: f64,
}

impl HighPass {
    pub fn new(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            prev_in: 0.0,
            out: 0.0,
        }
    }

    pub fn time_constant(&self) -> f64 {
        1.0 / (2.0 * PI * self.cutoff_hz)
    }

    pub fn step(&mut self, x: f64, dt: f64) -> f64 {
        let tau = self.time_constant();
        let a = tau / (tau + dt);
        self.out = a * (self.out + x - self.prev_in);
        self.prev_in = x;
        self.out
    }
}

/// Energy-fluctuation estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmcRefState {
    pub dw_sigma: f64,
    pub dw_delta: f64,
    pub hpf_sigma: HighPass,
    pub hpf_delta: HighPass,
    pub w_sigma_ref: f64,
    pub w_delta_ref: f64,
    /// Integrands are ramped in linearly over this time.
    pub ramp_time: f64,
    pub elapsed: f64,
}

impl MmcRefState {
    /// Defaults: `W_Σ★ = (C/N) V_dc²`, `W_Δ★ = 0`, ramp over two filter time constants.
    pub fn new(p: &MmcParams, hpf_cutoff: f64) -> Self {
        let hpf = HighPass::new(hpf_cutoff);
        Self {
            dw_sigma: 0.0,
            dw_delta: 0.0,
            hpf_sigma: hpf,
            hpf_delta: hpf,
            w_sigma_ref: p.c_prime() * p.v_dc * p.v_dc,
            w_delta_ref: 0.0,
            ramp_time: 2.0 * hpf.time_constant(),
            elapsed: 0.0,
        }
    }

    pub fn with_energy_refs(mut self, w_sigma: f64, w_delta: f64) -> Self {
        self.w_sigma_ref = w_sigma;
        self.w_delta_ref = w_delta;
        self
    }

    pub fn with_ramp(mut self, ramp_time: f64) -> Self {
        self.ramp_time = ramp_time;
        self
    }
}

/// High-passes the arm power sum/difference and integrates them (explicit Euler).
pub fn energy_fluctuations_step(
    state: &MmcRefState,
    e_v: f64,
    x2_star: f64,
    x1_star: f64,
    u_diff: f64,
    v_dc: f64,
    dt: f64,
) -> MmcRefState {
    let mut s = *state;
    let w = if s.ramp_time > 0.0 { (s.elapsed / s.ramp_time).min(1.0) } else { 1.0 };
    let p_sigma = -e_v * x2_star + (v_dc - 2.0 * u_diff) * x1_star;
    let p_delta = 0.5 * x2_star * (v_dc - 2.0 * u_diff) - 2.0 * e_v * x1_star;
    let hs = s.hpf_sigma.step(w * p_sigma, dt);
    let hd = s.hpf_delta.step(w * p_delta, dt);
    s.dw_sigma += dt * hs;
    s.dw_delta += dt * hd;
    s.elapsed += dt;
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmVoltageRefs {
    pub u_cu: f64,
    pub u_cl: f64,
    pub x3: f64,
    pub x4: f64,
}

pub fn capacitor_voltage_refs(state: &MmcRefState, p: &MmcParams) -> Result<ArmVoltageRefs> {
    let sigma = state.w_sigma_ref + state.dw_sigma;
    let delta = state.w_delta_ref + state.dw_delta;
    let k = p.n as f64 / p.c;
    let (ru, rl) = (k * (sigma + delta), k * (sigma - delta));
    if !(ru >= 0.0 && rl >= 0.0) {
        return Err(Error::ReferenceInfeasible {
            t: state.elapsed,
            reason: format!("negative arm-energy radicand (upper {ru:.6e}, lower {rl:.6e})"),
        });
    }
    let (u_cu, u_cl) = (ru.sqrt(), rl.sqrt());
    Ok(ArmVoltageRefs {
        u_cu,
        u_cl,
        x3: u_cu + u_cl,
        x4: u_cu - u_cl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedforward {
    pub n_u: f64,
    pub n_l: f64,
    pub u1: f64,
    pub u2: f64,
}

impl Feedforward {
    /// An insertion index outside `[0, 1]`.
    pub fn overmodulated(&self) -> bool {
        !(0.0..=1.0).contains(&self.n_u) || !(0.0..=1.0).contains(&self.n_l)
    }
}

pub fn feedforward_inputs(e_v: f64, u_diff: f64, v_dc: f64, u_cu: f64, u_cl: f64) -> Result<Feedforward> {
    if !(u_cu > 0.0 && u_cl > 0.0) {
        return Err(Error::param("u_C", "arm voltage references must be positive"));
    }
    let n_u = (0.5 * v_dc - e_v - u_diff) / u_cu;
    let n_l = (0.5 * v_dc + e_v - u_diff) / u_cl;
    Ok(Feedforward {
        n_u,
        n_l,
        u1: n_u + n_l,
        u2: n_u - n_l,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmcConfig {
    pub params: MmcParams,
    /// Row-major 2×2.
    pub kp: [[f64; 2]; 2],
    pub ki: [[f64; 2]; 2],
    pub hpf_cutoff: f64,
    /// Defaults to `(C/N) V_dc²`.
    pub w_sigma_ref: Option<f64>,
    pub w_delta_ref: f64,
}

impl MmcConfig {
    pub fn new(params: MmcParams, kp: [[f64; 2]; 2], ki: [[f64; 2]; 2]) -> Self {
        Self {
            params,
            kp,
            ki,
            hpf_cutoff: 5.0,
            w_sigma_ref: None,
            w_delta_ref: 0.0,
        }
    }
}

fn mat2(m: [[f64; 2]; 2]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
}

#[derive(Debug, Clone, Copy)]
struct Derived {
    phasor: Phasor,
    x1_star: f64,
    u_diff: f64,
}

impl Derived {
    fn of(p: &MmcParams) -> Self {
        let (x1_star, u_diff) = circulating_current_ref(p);
        Self {
            phasor: grid_current_phasor(p),
            x1_star,
            u_diff,
        }
    }
}

/// One MMC phase in closed loop with the passive-output PI.
#[derive(Debug, Clone)]
pub struct MmcLoop {
    cfg: MmcConfig,
    gains: PiGains,
    pi: ControllerState,
    refs: MmcRefState,
    derived: Derived,
}

impl MmcLoop {
    pub fn new(cfg: MmcConfig) -> Result<Self> {
        cfg.params.validate()?;
        if !(cfg.hpf_cutoff > 0.0) {
            return Err(Error::param("hpf_cutoff", "must be positive"));
        }
        let gains = PiGains::new(mat2(cfg.kp), mat2(cfg.ki))?;
        let mut refs = MmcRefState::new(&cfg.params, cfg.hpf_cutoff);
        let ws = cfg.w_sigma_ref.unwrap_or(refs.w_sigma_ref);
        refs = refs.with_energy_refs(ws, cfg.w_delta_ref);
        capacitor_voltage_refs(&refs, &cfg.params)?;
        Ok(Self {
            derived: Derived::of(&cfg.params),
            pi: ControllerState::new(2, ControllerMode::Linear),
            gains,
            refs,
            cfg,
        })
    }

    pub fn config(&self) -> &MmcConfig {
        &self.cfg
    }

    fn reference_at(&self, t: f64) -> Result<([f64; 4], ArmVoltageRefs, f64)> {
        let p = &self.cfg.params;
        let d = &self.derived;
        let x2 = d.phasor.amplitude * (p.omega() * t - d.phasor.phase).sin();
        let arm = capacitor_voltage_refs(&self.refs, p).map_err(|e| match e {
            Error::ReferenceInfeasible { reason, .. } => Error::ReferenceInfeasible { t, reason },
            other => other,
        })?;
        Ok(([d.x1_star, x2, arm.x3, arm.x4], arm, emf_ref(t, p)))
    }
}

impl ClosedLoop for MmcLoop {
    fn state_names(&self) -> Vec<String> {
        ["i_diff", "i_v", "u_Csum", "u_Cdelta"].map(String::from).to_vec()
    }

    fn input_names(&self) -> Vec<String> {
        vec!["u_sum".into(), "u_delta".into()]
    }

    fn aux_names(&self) -> Vec<String> {
        ["u_CU", "u_CL", "u_CU_ref", "u_CL_ref", "e_v", "dw_sigma", "dw_delta", "rank_margin", "overmod"]
            .map(String::from)
            .to_vec()
    }

    /// Starts on the reference with zero energy fluctuation.
    fn initial_state(&self) -> Vec<f64> {
        self.reference_at(0.0)
            .map(|(xs, _, _)| xs.to_vec())
            .unwrap_or_else(|_| vec![0.0; 4])
    }

    fn set_integrator(&mut self, z0: &[f64]) -> Result<()> {
        if z0.len() != 2 {
            return Err(Error::Dimension("mmc z0 must have length 2".into()));
        }
        self.pi.z.copy_from_slice(z0);
        Ok(())
    }

    fn control(&mut self, t: f64, x: &[f64], dt: f64, out: &mut ControlSample) -> Result<()> {
        let p = self.cfg.params;
        let (xs, arm, e_v) = self.reference_at(t)?;
        let ff = feedforward_inputs(e_v, self.derived.u_diff, p.v_dc, arm.u_cu, arm.u_cl)?;
        out.x_star.copy_from_slice(&xs);
        out.u_star[0] = ff.u1;
        out.u_star[1] = ff.u2;
        out.y.copy_from_slice(&mmc_output(&xs, x));
        out.z.copy_from_slice(&self.pi.z);
        self.pi.step(&self.gains, &out.y, &out.u_star, dt, &mut out.u);
        out.saturated = false;

        out.aux[0] = 0.5 * (x[2] + x[3]);
        out.aux[1] = 0.5 * (x[2] - x[3]);
        out.aux[2] = arm.u_cu;
        out.aux[3] = arm.u_cl;
        out.aux[4] = e_v;
        out.aux[5] = self.refs.dw_sigma;
        out.aux[6] = self.refs.dw_delta;
        out.aux[7] = rank_margin(xs[0], xs[1]);
        out.aux[8] = if ff.overmodulated() { 1.0 } else { 0.0 };

        if dt > 0.0 {
            self.refs = energy_fluctuations_step(&self.refs, e_v, xs[1], xs[0], self.derived.u_diff, p.v_dc, dt);
        }
        Ok(())
    }

    fn vector_field(&self, _t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let f = mmc_dynamics([x[0], x[1], x[2], x[3]], [u[0], u[1]], &self.cfg.params);
        dx.copy_from_slice(&f);
    }

    fn apply_event(&mut self, param: &str, change: ParamChange) -> Result<f64> {
        let p = &mut self.cfg.params;
        let slot = match param {
            "R" => &mut p.r,
            "L" => &mut p.l,
            "R_load" => &mut p.r_load,
            "L_load" => &mut p.l_load,
            "V_dc" => &mut p.v_dc,
            "e_amp" => &mut p.e_amp,
            other => return Err(Error::param(other, "not an event parameter of mmc")),
        };
        let old = *slot;
        *slot = change.apply(old);
        p.validate()?;
        self.derived = Derived::of(p);
        Ok(old)
    }

    fn storage_matrix(&self) -> Option<DMatrix<f64>> {
        Some(mmc_certificate_matrix(&self.cfg.params))
    }

    fn integral_gain(&self) -> Option<DMatrix<f64>> {
        Some(self.gains.ki().clone())
    }
}
