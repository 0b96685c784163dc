//! PI laws driven by the passive output.
//!
//! The tracking controller is `ż = −y`, `u = −Kp y + Ki z + u★`; the `tanh`
//! variant replaces the proportional term with `−b·tanh(y/a)`. Both integrate
//! `z` with explicit Euler at the caller's step.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Symmetric positive-definite PI gain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PiGains {
    kp: DMatrix<f64>,
    ki: DMatrix<f64>,
}

fn check_spd(name: &str, k: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !k.is_square() {
        return Err(Error::Dimension(format!("{name} must be square")));
    }
    let asym = (k - k.transpose()).amax();
    if asym > tol * k.amax().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym, tol });
    }
    let min = SymmetricEigen::new(k.clone()).eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: min });
    }
    Ok(())
}

impl PiGains {
    pub fn new(kp: DMatrix<f64>, ki: DMatrix<f64>) -> Result<Self> {
        check_spd("Kp", &kp, 1e-12)?;
        check_spd("Ki", &ki, 1e-12)?;
        if kp.shape() != ki.shape() {
            return Err(Error::Dimension("Kp and Ki must have the same size".into()));
        }
        Ok(Self { kp, ki })
    }

    /// Scalar-gain convenience for `m = 1`.
    pub fn scalar(kp: f64, ki: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, kp), DMatrix::from_element(1, 1, ki))
    }

    /// `Kp = kp·I`, `Ki = ki·I`.
    pub fn diagonal(m: usize, kp: f64, ki: f64) -> Result<Self> {
        Self::new(DMatrix::identity(m, m) * kp, DMatrix::identity(m, m) * ki)
    }

    /// All-zero gains: the controller reduces to the feedforward `u★`. This
    /// sits outside the positive-definite class and carries no convergence
    /// guarantee.
    pub fn disabled(m: usize) -> Self {
        Self {
            kp: DMatrix::zeros(m, m),
            ki: DMatrix::zeros(m, m),
        }
    }

    pub fn m(&self) -> usize {
        self.kp.nrows()
    }

    pub fn kp(&self) -> &DMatrix<f64> {
        &self.kp
    }

    pub fn ki(&self) -> &DMatrix<f64> {
        &self.ki
    }
}

/// Shape of the proportional term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ControllerMode {
    Linear,
    /// `−b·tanh(y/a)`, applied component-wise.
    Tanh { a: f64, b: f64 },
}

impl ControllerMode {
    pub fn tanh(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::param("a", "must be positive"));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::param("b", "must be positive"));
        }
        Ok(ControllerMode::Tanh { a, b })
    }
}

/// Integrator state `z` plus the proportional-term mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub z: Vec<f64>,
    pub mode: ControllerMode,
}

impl ControllerState {
    pub fn new(m: usize, mode: ControllerMode) -> Self {
        Self {
            z: vec![0.0; m],
            mode,
        }
    }

    pub fn with_z(z: Vec<f64>, mode: ControllerMode) -> Self {
        Self { z, mode }
    }

    /// Computes `u` from the current `z`, then advances `z ← z − dt·y`.
    pub fn step(&mut self, gains: &PiGains, y: &[f64], u_star: &[f64], dt: f64, u: &mut [f64]) {
        let m = self.z.len();
        let ki = gains.ki.as_slice();
        for i in 0..m {
            let mut acc = u_star[i];
            for j in 0..m {
                acc += ki[j * m + i] * self.z[j];
            }
            u[i] = acc;
        }
        match self.mode {
            ControllerMode::Linear => {
                let kp = gains.kp.as_slice();
                for i in 0..m {
                    for j in 0..m {
                        u[i] -= kp[j * m + i] * y[j];
                    }
                }
            }
            ControllerMode::Tanh { a, b } => {
                for i in 0..m {
                    u[i] -= b * (y[i] / a).tanh();
                }
            }
        }
        for (zi, yi) in self.z.iter_mut().zip(y) {
            *zi -= dt * yi;
        }
    }
}

/// Linear PI update: `u = −Kp y + Ki z + u★`, `z' = z − dt·y`.
pub fn pi_update(
    state: &ControllerState,
    gains: &PiGains,
    y: &[f64],
    u_star: &[f64],
    dt: f64,
) -> (Vec<f64>, ControllerState) {
    let mut next = ControllerState {
        z: state.z.clone(),
        mode: ControllerMode::Linear,
    };
    let mut u = vec![0.0; state.z.len()];
    next.step(gains, y, u_star, dt, &mut u);
    next.mode = state.mode;
    (u, next)
}

/// `tanh` PI update: `u = −b·tanh(y/a) + Ki z + u★`, `z' = z − dt·y`.
///
/// The state's own `a`, `b` are used; a linear-mode state falls back to
/// `a = b = 1`.
pub fn tanh_pi_update(
    state: &ControllerState,
    ki: &DMatrix<f64>,
    y: &[f64],
    u_star: &[f64],
    dt: f64,
) -> (Vec<f64>, ControllerState) {
    let mode = match state.mode {
        m @ ControllerMode::Tanh { .. } => m,
        ControllerMode::Linear => ControllerMode::Tanh { a: 1.0, b: 1.0 },
    };
    let gains = PiGains {
        kp: DMatrix::zeros(ki.nrows(), ki.ncols()),
        ki: ki.clone(),
    };
    let mut next = ControllerState {
        z: state.z.clone(),
        mode,
    };
    let mut u = vec![0.0; state.z.len()];
    next.step(&gains, y, u_star, dt, &mut u);
    next.mode = state.mode;
    (u, next)
}

/// Scalar PI with output clamping and conditional integration.
///
/// The integrator stops accumulating whenever the unclamped output is beyond a
/// limit and the error would push it further out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntiWindupPi {
    pub kp: f64,
    pub ki: f64,
    pub integrator: f64,
    pub lo: f64,
    pub hi: f64,
}

impl AntiWindupPi {
    pub fn new(kp: f64, ki: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::param("limits", format!("lo ({lo}) must be below hi ({hi})")));
        }
        Ok(Self {
            kp,
            ki,
            integrator: 0.0,
            lo,
            hi,
        })
    }

    pub fn with_integrator(mut self, integrator: f64) -> Self {
        self.integrator = integrator;
        self
    }

    /// Returns the clamped output and whether it saturated.
    pub fn step(&mut self, e: f64, dt: f64) -> (f64, bool) {
        let raw = self.kp * e + self.integrator;
        let out = raw.clamp(self.lo, self.hi);
        let winding_up = (raw > self.hi && e > 0.0) || (raw < self.lo && e < 0.0);
        if !winding_up {
            self.integrator += self.ki * e * dt;
        }
        (out, out != raw)
    }
}

/// Value-semantics wrapper around [`AntiWindupPi::step`].
pub fn antiwindup_pi_update(state: &AntiWindupPi, e: f64, dt: f64) -> (f64, AntiWindupPi) {
    let mut next = *state;
    let (phi, _) = next.step(e, dt);
    (phi, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn disabled_gains_pass_feedforward() {
        let st = ControllerState::with_z(vec![0.3, -0.1], ControllerMode::Linear);
        let (u, next) = pi_update(&st, &PiGains::disabled(2), &[1.0, 2.0], &[0.5, 0.7], 0.1);
        assert_eq!(u, vec![0.5, 0.7]);
        assert_relative_eq!(next.z[0], 0.3 - 0.1);
        assert_relative_eq!(next.z[1], -0.1 - 0.2);
    }

    #[test]
    fn zero_output_freezes_integrator() {
        let gains = PiGains::scalar(0.013, 1e-4).unwrap();
        let st = ControllerState::with_z(vec![40.0], ControllerMode::Linear);
        let (u, next) = pi_update(&st, &gains, &[0.0], &[0.6], 0.01);
        assert_relative_eq!(u[0], 1e-4 * 40.0 + 0.6, max_relative = 1e-15);
        assert_eq!(next.z, vec![40.0]);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let gains = PiGains::scalar(0.013, 1e-4).unwrap();
        let st = ControllerState::new(1, ControllerMode::Linear);
        let (u, next) = pi_update(&st, &gains, &[2.0], &[0.6], 0.01);
        assert_relative_eq!(u[0], 0.574, max_relative = 1e-12);
        assert_relative_eq!(next.z[0], -0.02, max_relative = 1e-12);
    }

    #[test]
    fn tanh_hand_evaluation() {
        let ki = DMatrix::from_element(1, 1, 1e-4);
        let st = ControllerState::new(1, ControllerMode::tanh(55.0, 0.25).unwrap());
        let (u, _) = tanh_pi_update(&st, &ki, &[55.0], &[0.0], 1e-6);
        assert_relative_eq!(u[0], -0.25 * 1f64.tanh(), max_relative = 1e-12);
        assert_relative_eq!(u[0], -0.190_40, epsilon = 1e-5);

        let st = ControllerState::with_z(vec![100.0], ControllerMode::tanh(55.0, 0.25).unwrap());
        let (u, next) = tanh_pi_update(&st, &ki, &[0.0], &[0.6], 1e-6);
        assert_relative_eq!(u[0], 0.61, max_relative = 1e-12);
        assert_eq!(next.z, vec![100.0]);
    }

    #[test]
    fn gains_must_be_positive_definite() {
        assert!(PiGains::scalar(0.0, 1.0).is_err());
        assert!(PiGains::scalar(1.0, -1.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(PiGains::new(asym, DMatrix::identity(2, 2)).is_err());
        assert!(ControllerMode::tanh(0.0, 1.0).is_err());
        assert!(ControllerMode::tanh(1.0, -1.0).is_err());
    }

    #[test]
    fn antiwindup_zero_error_zero_output() {
        let pi = AntiWindupPi::new(0.5, 2.0, -10.0, 10.0).unwrap();
        let (phi, next) = antiwindup_pi_update(&pi, 0.0, 1e-3);
        assert_eq!(phi, 0.0);
        assert_eq!(next.integrator, 0.0);
    }

    #[test]
    fn antiwindup_matches_textbook_pi_when_unsaturated() {
        // ramp error e(t) = 0.1 t, plain PI φ = kp e + ki Σ e dt
        let (kp, ki, dt) = (0.7, 3.0, 1e-3);
        let mut pi = AntiWindupPi::new(kp, ki, -1e6, 1e6).unwrap();
        let mut acc = 0.0;
        for k in 0..5000 {
            let e = 0.1 * k as f64 * dt;
            let plain = kp * e + acc;
            let (phi, sat) = pi.step(e, dt);
            assert!(!sat);
            assert_relative_eq!(phi, plain, max_relative = 1e-12);
            acc += ki * e * dt;
        }
    }

    #[test]
    fn antiwindup_holds_integrator_when_saturated_high() {
        let pi = AntiWindupPi::new(1.0, 5.0, -1.0, 1.0).unwrap().with_integrator(0.3);
        let (phi, next) = antiwindup_pi_update(&pi, 2.0, 1e-3);
        assert_eq!(phi, 1.0);
        assert_eq!(next.integrator, 0.3);
        // a reversed error that leaves saturation unwinds immediately
        let (_, next) = antiwindup_pi_update(&next, -0.5, 1e-3);
        assert!(next.integrator < 0.3);
    }

    #[test]
    fn antiwindup_rejects_inverted_limits() {
        assert!(AntiWindupPi::new(1.0, 1.0, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn pi_is_affine_with_exact_coefficients(
            kp in 0.01f64..5.0, ki in 0.01f64..5.0,
            y in -10f64..10.0, z in -10f64..10.0, us in -2f64..2.0,
        ) {
            let gains = PiGains::scalar(kp, ki).unwrap();
            let u_of = |y: f64, z: f64, us: f64| {
                pi_update(&ControllerState::with_z(vec![z], ControllerMode::Linear), &gains, &[y], &[us], 1e-3).0[0]
            };
            let h = 1e-3;
            let base = u_of(y, z, us);
            prop_assert!(((u_of(y + h, z, us) - base) / h + kp).abs() < 1e-6);
            prop_assert!(((u_of(y, z + h, us) - base) / h - ki).abs() < 1e-6);
            prop_assert!(((u_of(y, z, us + h) - base) / h - 1.0).abs() < 1e-6);
        }

        #[test]
        fn integrator_update_is_gain_independent(
            kp in 0.01f64..5.0, ki in 0.01f64..5.0, y in -10f64..10.0, z in -10f64..10.0, dt in 1e-6f64..1e-1,
        ) {
            let st = ControllerState::with_z(vec![z], ControllerMode::Linear);
            let (_, a) = pi_update(&st, &PiGains::scalar(kp, ki).unwrap(), &[y], &[0.0], dt);
            let (_, b) = pi_update(&st, &PiGains::scalar(1.0, 1.0).unwrap(), &[y], &[0.0], dt);
            let (_, c) = tanh_pi_update(&ControllerState::with_z(vec![z], ControllerMode::Tanh { a: 2.0, b: 3.0 }),
                &DMatrix::from_element(1, 1, ki), &[y], &[0.0], dt);
            prop_assert_eq!(a.z[0], b.z[0]);
            prop_assert_eq!(a.z[0], c.z[0]);
            prop_assert_eq!(a.z[0], z - dt * y);
        }

        #[test]
        fn tanh_term_is_bounded(y in -1e6f64..1e6, a in 1e-3f64..100.0, b in 1e-3f64..10.0) {
            let st = ControllerState::new(1, ControllerMode::Tanh { a, b });
            let (u, _) = tanh_pi_update(&st, &DMatrix::from_element(1, 1, 1.0), &[y], &[0.0], 1e-3);
            prop_assert!(u[0].abs() <= b);
        }

        #[test]
        fn tanh_small_signal_taylor_bound(r in -1e-3f64..1e-3, a in 0.1f64..100.0, b in 0.01f64..10.0) {
            let y = r * a;
            let st = ControllerState::new(1, ControllerMode::Tanh { a, b });
            let (u, _) = tanh_pi_update(&st, &DMatrix::from_element(1, 1, 1.0), &[y], &[0.0], 1e-3);
            let linear = -(b / a) * y;
            prop_assert!((u[0] - linear).abs() <= 0.34 * b * (y.abs() / a).powi(3) + 1e-18);
        }

        #[test]
        fn antiwindup_integrator_stays_bounded(
            e in 0.1f64..20.0, kp in 0.0f64..2.0, ki in 0.1f64..50.0, hi in 0.5f64..5.0,
        ) {
            let mut pi = AntiWindupPi::new(kp, ki, -hi, hi).unwrap();
            let dt = 1e-3;
            for k in 0..20_000 {
                let err = if (k / 5000) % 2 == 0 { e } else { -e };
                let (phi, _) = pi.step(err, dt);
                prop_assert!(phi.abs() <= hi);
                prop_assert!(pi.integrator.abs() <= hi + kp * e + ki * e * dt + 1e-12);
            }
        }
    }
}
