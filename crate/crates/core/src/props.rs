//! Randomized check of the dissipation inequality and of the closed-loop
//! Lyapunov function on certified bilinear systems.
//!
//! Systems are certified by construction: with a random diagonal `P`,
//! `Bᵢ = P⁻¹Sᵢ` and `A = P⁻¹(−D + S₀)` for skew `Sᵢ` and diagonal `D ⪰ 0`.
//! References are equilibria `(x★, u★)` with the disturbance solved from the
//! plant equation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bilinear::{
    tracking_rank_matrix, verify_storage_certificate, BilinearSystem, Disturbance, DEFAULT_CERT_TOL,
    DEFAULT_RANK_TOL,
};
use crate::control::{ControllerMode, PiGains};
use crate::parallel::{map_indexed, Execution};
use crate::sim::{dissipation_check, lyapunov_monitor, simulate, BilinearLoop, Drive, SimConfig, SinusoidalInput};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropertyConfig {
    pub seed: u64,
    pub count: usize,
    pub dt: f64,
    /// Horizon of the open-loop dissipation runs.
    pub dissipation_t_end: f64,
    /// Horizon of the closed-loop runs.
    pub lyapunov_t_end: f64,
    /// Required `‖x̃(T)‖ / ‖x̃(0)‖` when the rank test passes.
    pub convergence_ratio: f64,
    /// Longest closed-loop horizon spent waiting for that ratio.
    pub convergence_horizon: f64,
}

const CONTINUATION_SEGMENT: f64 = 100.0;
const CONTINUATION_DECIMATION: usize = 50;
/// e-foldings of the slowest mode to wait for (e⁻²⁵ ≈ 1.4e-11).
const DECAY_SPANS: f64 = 25.0;
/// `dt · ρ(J)` used for the continuation step.
const CONTINUATION_STEP_SCALE: f64 = 0.2;
const CONTINUATION_MAX_STEP: f64 = 0.02;

impl PropertyConfig {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            dt: 2.5e-4,
            dissipation_t_end: 5.0,
            lyapunov_t_end: 60.0,
            convergence_ratio: 1e-4,
            convergence_horizon: 1e6,
        }
    }
}

/// A generated test case.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub system: BilinearSystem,
    pub p: DMatrix<f64>,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub x0: Vec<f64>,
    pub gains: PiGains,
    pub excitation: SinusoidalInput,
}

fn skew(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(-1.0..1.0);
            s[(i, j)] = v;
            s[(j, i)] = -v;
        }
    }
    s
}

fn spd(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
    let c = rng.random_range(0.5..1.5);
    &g * g.transpose() + DMatrix::identity(m, m) * c
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn excitation(rng: &mut ChaCha8Rng, m: usize) -> SinusoidalInput {
    SinusoidalInput {
        channels: (0..m)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.0..0.4),
                            rng.random_range(0.2..20.0),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Draws a case; `asymmetry` adds `σ I` inside every `P Bᵢ` (negative control).
pub fn random_case(rng: &mut ChaCha8Rng, asymmetry: f64) -> Result<RandomCase> {
    let n = rng.random_range(2..=4usize);
    let m = rng.random_range(1..=2usize);
    let pd: Vec<f64> = (0..n).map(|_| 2f64.powf(rng.random_range(-1.0..1.0))).collect();
    let p = DMatrix::from_diagonal(&DVector::from_column_slice(&pd));
    let p_inv = DMatrix::from_diagonal(&DVector::from_iterator(n, pd.iter().map(|v| 1.0 / v)));
    let b: Vec<DMatrix<f64>> = (0..m)
        .map(|_| &p_inv * (skew(rng, n) + DMatrix::identity(n, n) * asymmetry))
        .collect();
    let dd: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.random_range(0.2..1.5);
            // some undamped directions; the broken case gets none at all
            let keep = rng.random_bool(0.7);
            if keep && asymmetry == 0.0 { v } else { 0.0 }
        })
        .collect();
    let a = &p_inv * (skew(rng, n) - DMatrix::from_diagonal(&DVector::from_column_slice(&dd)));
    let x_star = uniform_vec(rng, n, 2.0);
    let u_star = uniform_vec(rng, m, 1.0);
    let mut m_star = a.clone();
    for (bi, ui) in b.iter().zip(&u_star) {
        m_star += bi * *ui;
    }
    let d = -(&m_star * DVector::from_column_slice(&x_star));
    let system = BilinearSystem::new(a, b, Disturbance::Constant(d))?;
    let dx = uniform_vec(rng, n, 1.0);
    let x0 = x_star.iter().zip(&dx).map(|(a, b)| a + b).collect();
    let gains = PiGains::new(spd(rng, m), spd(rng, m))?;
    let excitation = excitation(rng, m);
    Ok(RandomCase {
        system,
        p,
        x_star,
        u_star,
        x0,
        gains,
        excitation,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub certificate_valid: bool,
    pub rank_full: bool,
    /// Smallest singular value of the stacked rank-test matrix.
    pub min_singular_value: f64,
    /// Slowest nonzero decay rate of the closed loop linearised at `(x★, z)`.
    pub decay_rate: f64,
    pub dissipation_max_excess: f64,
    pub dissipation_tolerance: f64,
    pub dissipation_ok: bool,
    pub lyapunov_max_increase: f64,
    pub lyapunov_tolerance: f64,
    pub lyapunov_ok: bool,
    /// `‖x̃(T)‖ / ‖x̃(0)‖` of the closed-loop run.
    pub convergence: f64,
    pub convergence_ok: bool,
    /// Closed-loop time simulated.
    pub converged_at: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NegativeControl {
    pub certificate_valid: bool,
    pub max_excess: f64,
    pub tolerance: f64,
    pub violations: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub config: PropertyConfig,
    pub dissipation_failures: usize,
    pub lyapunov_failures: usize,
    pub rank_full_cases: usize,
    pub convergence_failures: usize,
    pub errors: usize,
    pub negative_control: NegativeControl,
    pub cases: Vec<CaseResult>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.dissipation_failures == 0
            && self.lyapunov_failures == 0
            && self.convergence_failures == 0
            && self.errors == 0
            && self.negative_control.flagged
    }
}

fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// The certified case the suite draws for `(seed, index)`.
pub fn suite_case(seed: u64, index: usize) -> Result<RandomCase> {
    random_case(&mut case_rng(seed, index as u64), 0.0)
}

fn run_case(cfg: &PropertyConfig, index: usize) -> CaseResult {
    let mut res = CaseResult {
        index,
        n: 0,
        m: 0,
        certificate_valid: false,
        rank_full: false,
        min_singular_value: f64::NAN,
        decay_rate: f64::NAN,
        dissipation_max_excess: f64::NAN,
        dissipation_tolerance: f64::NAN,
        dissipation_ok: false,
        lyapunov_max_increase: f64::NAN,
        lyapunov_tolerance: f64::NAN,
        lyapunov_ok: false,
        convergence: f64::NAN,
        convergence_ok: false,
        converged_at: f64::NAN,
        error: None,
    };
    if let Err(e) = evaluate_case(cfg, index, &mut res) {
        res.error = Some(e.to_string());
    }
    res
}

fn tilde_norm(x: &[f64], xs: &[f64]) -> f64 {
    x.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn evaluate_case(cfg: &PropertyConfig, index: usize, res: &mut CaseResult) -> Result<()> {
    let case = suite_case(cfg.seed, index)?;
    res.n = case.system.n();
    res.m = case.system.m();
    let cert = verify_storage_certificate(&case.system, &case.p, DEFAULT_CERT_TOL)?;
    res.certificate_valid = cert.is_valid();
    if let Some(qs) = cert.q_sqrt() {
        let rank = tracking_rank_matrix(cert.p(), cert.b(), qs, &case.x_star, DEFAULT_RANK_TOL)?;
        res.rank_full = rank.is_full();
        res.min_singular_value = rank.min_singular_value;
    }

    let open = Drive::OpenLoop(case.excitation.clone());
    let mut lp = BilinearLoop::new(case.system.clone(), case.p.clone(), open)?
        .with_constant_reference(case.x_star.clone(), case.u_star.clone());
    let tr = simulate(&mut lp, &case.x0, &SimConfig::new(cfg.dt, cfg.dissipation_t_end))?;
    let d = dissipation_check(&tr, &case.p);
    res.dissipation_max_excess = d.max_excess;
    res.dissipation_tolerance = d.tolerance;
    res.dissipation_ok = d.passed();

    let drive = Drive::pi(case.gains.clone(), ControllerMode::Linear);
    let mut lp = BilinearLoop::new(case.system.clone(), case.p.clone(), drive)?
        .with_constant_reference(case.x_star.clone(), case.u_star.clone());
    let tr = simulate(&mut lp, &case.x0, &SimConfig::new(cfg.dt, cfg.lyapunov_t_end))?;
    let l = lyapunov_monitor(&tr, &case.p, case.gains.ki());
    res.lyapunov_tolerance = l.tolerance;
    let e0 = tilde_norm(&case.x0, &case.x_star);
    let mut x = tr.x.row(tr.len() - 1).to_vec();
    res.convergence = tilde_norm(&x, &case.x_star) / e0;
    res.lyapunov_ok = l.non_increasing();
    res.lyapunov_max_increase = l.max_increase;

    // Weakly damped cases: keep going until the slowest linearised mode has
    // had time to decay, on a coarser step and a decimated record. W is still
    // monitored on every recorded interval.
    let (abscissa, radius) = linearized_spectrum(&case);
    res.decay_rate = -abscissa;
    let horizon = if abscissa < 0.0 {
        (DECAY_SPANS / -abscissa).clamp(cfg.lyapunov_t_end, cfg.convergence_horizon)
    } else {
        cfg.convergence_horizon
    };
    let dt_c = (CONTINUATION_STEP_SCALE / radius).clamp(cfg.dt, CONTINUATION_MAX_STEP);
    let seg_len = (horizon / 20.0).max(CONTINUATION_SEGMENT);
    let mut elapsed = cfg.lyapunov_t_end;
    while res.rank_full && res.convergence > cfg.convergence_ratio && elapsed < horizon {
        let seg = SimConfig::new(dt_c, seg_len).record_every(CONTINUATION_DECIMATION);
        let tr = simulate(&mut lp, &x, &seg)?;
        let l = lyapunov_monitor(&tr, &case.p, case.gains.ki());
        res.lyapunov_ok &= l.max_increase <= res.lyapunov_tolerance;
        res.lyapunov_max_increase = res.lyapunov_max_increase.max(l.max_increase);
        x = tr.x.row(tr.len() - 1).to_vec();
        res.convergence = tilde_norm(&x, &case.x_star) / e0;
        elapsed += seg_len;
    }
    res.converged_at = elapsed;
    res.convergence_ok = !res.rank_full || res.convergence <= cfg.convergence_ratio;
    Ok(())
}

/// Spectral abscissa over the nonzero modes and spectral radius of the
/// closed loop linearised at the reference.
///
/// Integrator directions in the kernel of `[B₁x★ … Bₘx★] Ki` are equilibria
/// (zero modes) and are left out of the abscissa.
pub fn linearized_spectrum(case: &RandomCase) -> (f64, f64) {
    let (n, m) = (case.system.n(), case.system.m());
    let xs = DVector::from_column_slice(&case.x_star);
    let mut a = case.system.a().clone();
    let mut g = DMatrix::zeros(n, m);
    let mut c = DMatrix::zeros(m, n);
    for (i, (b, u)) in case.system.b().iter().zip(&case.u_star).enumerate() {
        a += b * *u;
        g.set_column(i, &(b * &xs));
        c.set_row(i, &(&case.p * b * &xs).transpose());
    }
    let mut j = DMatrix::zeros(n + m, n + m);
    j.view_mut((0, 0), (n, n)).copy_from(&(&a - &g * case.gains.kp() * &c));
    j.view_mut((0, n), (n, m)).copy_from(&(&g * case.gains.ki()));
    j.view_mut((n, 0), (m, n)).copy_from(&(-&c));
    let eig = j.complex_eigenvalues();
    let radius = eig.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let abscissa = eig
        .iter()
        .filter(|l| l.norm() > 1e-9 * radius.max(1.0))
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    (abscissa, radius)
}

/// Broken certificate: `sym(P Bᵢ) = σ I`, no damping, same excitation policy.
fn negative_control(cfg: &PropertyConfig) -> Result<NegativeControl> {
    let mut rng = case_rng(cfg.seed, u64::MAX);
    let case = random_case(&mut rng, 0.5)?;
    let cert = verify_storage_certificate(&case.system, &case.p, DEFAULT_CERT_TOL)?;
    let mut lp = BilinearLoop::new(case.system.clone(), case.p.clone(), Drive::OpenLoop(case.excitation.clone()))?
        .with_constant_reference(case.x_star.clone(), case.u_star.clone());
    let tr = simulate(&mut lp, &case.x0, &SimConfig::new(cfg.dt, cfg.dissipation_t_end))?;
    let d = dissipation_check(&tr, &case.p);
    Ok(NegativeControl {
        certificate_valid: cert.is_valid(),
        max_excess: d.max_excess,
        tolerance: d.tolerance,
        violations: d.violations,
        flagged: !cert.is_valid() && !d.passed(),
    })
}

pub fn run_property_suite(cfg: &PropertyConfig, exec: Execution) -> Result<PropertyReport> {
    if cfg.count == 0 {
        return Err(crate::Error::param("count", "must be at least 1"));
    }
    let cases = map_indexed(cfg.count, exec, |i| run_case(cfg, i));
    let negative_control = negative_control(cfg)?;
    Ok(PropertyReport {
        config: *cfg,
        dissipation_failures: cases.iter().filter(|c| c.error.is_none() && !c.dissipation_ok).count(),
        lyapunov_failures: cases.iter().filter(|c| c.error.is_none() && !c.lyapunov_ok).count(),
        rank_full_cases: cases.iter().filter(|c| c.rank_full).count(),
        convergence_failures: cases.iter().filter(|c| c.error.is_none() && !c.convergence_ok).count(),
        errors: cases.iter().filter(|c| c.error.is_some()).count(),
        negative_control,
        cases,
    })
}
