//! Bilinear plants, quadratic storage certificates and the passive output.
//!
//! A certificate for `ẋ = A x + d + Σ uᵢ Bᵢ x` is a matrix `P = Pᵀ > 0` with
//! `sym(PA) ≤ 0` and `sym(PBᵢ) = 0`. With such a `P`, the incremental model
//! around an admissible trajectory `x★` is passive from `ũ = u − u★` to
//! `yᵢ = x★ᵀ Bᵢᵀ P x` with storage `V = ½ x̃ᵀ P x̃`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::{Error, Result};

/// Default absolute tolerance on certificate residuals (before scaling).
pub const DEFAULT_CERT_TOL: f64 = 1e-9;
/// Default relative singular-value threshold for the rank test.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

type DisturbanceFn = dyn Fn(f64, &mut [f64]) + Send + Sync;

/// Measurable disturbance `d(t)`.
#[derive(Clone, Default)]
pub enum Disturbance {
    #[default]
    Zero,
    Constant(DVector<f64>),
    /// Writes `d(t)` into the output slice.
    Function(Arc<DisturbanceFn>),
}

impl Disturbance {
    pub fn function<F>(f: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Disturbance::Function(Arc::new(f))
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Disturbance::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            Disturbance::Constant(d) => out.copy_from_slice(d.as_slice()),
            Disturbance::Function(f) => f(t, out),
        }
    }

    pub fn eval(&self, t: f64, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        self.eval_into(t, out.as_mut_slice());
        out
    }
}

impl fmt::Debug for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Disturbance::Zero => write!(f, "Zero"),
            Disturbance::Constant(d) => f.debug_tuple("Constant").field(&d.as_slice()).finish(),
            Disturbance::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// `ẋ = A x + d(t) + Σᵢ uᵢ Bᵢ x`.
#[derive(Debug, Clone)]
pub struct BilinearSystem {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    d: Disturbance,
}

impl BilinearSystem {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>, d: Disturbance) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.len() > n {
            return Err(Error::Dimension(format!(
                "m = {} inputs exceeds n = {} states",
                b.len(),
                n
            )));
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "B{} is {}x{}, expected {n}x{n}",
                    i + 1,
                    bi.nrows(),
                    bi.ncols()
                )));
            }
        }
        if a.iter().chain(b.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
            return Err(Error::param("A/B", "matrix entries must be finite"));
        }
        if let Disturbance::Constant(dv) = &d {
            if dv.len() != n {
                return Err(Error::Dimension(format!(
                    "d has length {}, expected {n}",
                    dv.len()
                )));
            }
        }
        Ok(Self { a, b, d })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn disturbance(&self) -> &Disturbance {
        &self.d
    }

    /// Replaces `d`, keeping `A` and `B`.
    pub fn with_disturbance(mut self, d: Disturbance) -> Self {
        self.d = d;
        self
    }

    /// Evaluates the vector field into `dx`. `x`, `dx` have length `n`, `u`
    /// has length `m`.
    pub fn vector_field(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let n = self.n();
        self.d.eval_into(t, dx);
        // column-major storage: entry (i, j) sits at j * n + i
        let a = self.a.as_slice();
        for j in 0..n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let col = &a[j * n..(j + 1) * n];
            for i in 0..n {
                dx[i] += col[i] * xj;
            }
        }
        for (bk, &uk) in self.b.iter().zip(u) {
            if uk == 0.0 {
                continue;
            }
            let bs = bk.as_slice();
            for j in 0..n {
                let s = uk * x[j];
                if s == 0.0 {
                    continue;
                }
                let col = &bs[j * n..(j + 1) * n];
                for i in 0..n {
                    dx[i] += col[i] * s;
                }
            }
        }
    }
}

/// Symmetric part `½(M + Mᵀ)`.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues
}

/// Per-condition violation magnitudes of a candidate certificate.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateResiduals {
    /// Smallest eigenvalue of `P` (must be positive).
    pub p_min_eigenvalue: f64,
    /// Largest eigenvalue of `sym(PA)` (must be ≤ 0).
    pub pa_max_eigenvalue: f64,
    /// `‖sym(PBᵢ)‖_F` for each input.
    pub pb_sym_norms: Vec<f64>,
    /// Tolerance the constraint residuals were compared against.
    pub effective_tol: f64,
}

/// Result of checking the storage-function conditions for a given `P`.
#[derive(Debug, Clone)]
pub struct StorageCertificate {
    p: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    q: Option<DMatrix<f64>>,
    q_sqrt: Option<DMatrix<f64>>,
    valid: bool,
    residuals: CertificateResiduals,
}

impl StorageCertificate {
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Input matrices the certificate was checked against.
    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    /// `Q = −sym(PA)`, present when the certificate is valid.
    pub fn q(&self) -> Option<&DMatrix<f64>> {
        self.q.as_ref()
    }

    pub fn q_sqrt(&self) -> Option<&DMatrix<f64>> {
        self.q_sqrt.as_ref()
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn residuals(&self) -> &CertificateResiduals {
        &self.residuals
    }

    pub fn storage(&self, x_tilde: &[f64]) -> f64 {
        quadratic_form(&self.p, x_tilde) * 0.5
    }

    pub fn output_map(&self) -> PassiveOutputMap {
        PassiveOutputMap::new(&self.p, &self.b)
    }

    pub(crate) fn require_valid(&self) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
        match (&self.q, &self.q_sqrt) {
            (Some(q), Some(s)) if self.valid => Ok((q, s)),
            _ => Err(Error::param("P", "storage certificate is not valid")),
        }
    }
}

/// `xᵀ M x` for a column-major square matrix.
pub fn quadratic_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let s = m.as_slice();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += x[i] * s[j * n + i];
        }
        acc += col * x[j];
    }
    acc
}

/// Checks `P = Pᵀ > 0`, `sym(PA) ≤ 0`, `sym(PBᵢ) = 0`.
///
/// Constraint residuals on `sym(PA)` and `sym(PBᵢ)` are compared against
/// `tol · max(1, ‖P‖_F · max(‖A‖_F, ‖Bᵢ‖_F))`; the positivity of `P` against
/// `tol` itself. Residuals are reported regardless of the verdict.
pub fn verify_storage_certificate(
    sys: &BilinearSystem,
    p: &DMatrix<f64>,
    tol: f64,
) -> Result<StorageCertificate> {
    let n = sys.n();
    if p.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "P is {}x{}, system has n = {n}",
            p.nrows(),
            p.ncols()
        )));
    }
    let p_norm = p.norm();
    let asym = max_asymmetry(p);
    if asym > tol * p_norm.max(1.0) {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tol: tol * p_norm.max(1.0),
        });
    }
    let p = sym(p);

    let op_norm = sys
        .b()
        .iter()
        .map(|b| b.norm())
        .fold(sys.a().norm(), f64::max);
    let effective_tol = tol * (p_norm * op_norm).max(1.0);

    let p_min = eigenvalues(&p).min();
    let pa = sym(&(&p * sys.a()));
    let pa_max = eigenvalues(&pa).max();
    let pb_norms: Vec<f64> = sys.b().iter().map(|b| sym(&(&p * b)).norm()).collect();

    let valid = p_min > tol
        && pa_max <= effective_tol
        && pb_norms.iter().all(|&r| r <= effective_tol);

    let (q, q_sqrt) = if valid {
        let q = -pa;
        let s = psd_sqrt(&q, effective_tol)?;
        (Some(q), Some(s))
    } else {
        (None, None)
    };

    Ok(StorageCertificate {
        p,
        b: sys.b().to_vec(),
        q,
        q_sqrt,
        valid,
        residuals: CertificateResiduals {
            p_min_eigenvalue: p_min,
            pa_max_eigenvalue: pa_max,
            pb_sym_norms: pb_norms,
            effective_tol,
        },
    })
}

/// Symmetric PSD square root by eigendecomposition.
///
/// Eigenvalues in `[−tol, tol·max(1, ‖M‖)]` are set to zero, so roundoff
/// around an exact zero does not turn into a spurious `√ε`-sized direction;
/// anything below `−tol` is rejected.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = max_asymmetry(m);
    let scale = m.norm().max(1.0);
    if asym > tol * scale {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tol: tol * scale,
        });
    }
    let eig = SymmetricEigen::new(sym(m));
    if let Some(&worst) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::NotPsd { eigenvalue: worst });
    }
    let floor = tol * scale;
    let roots = eig.eigenvalues.map(|l| if l <= floor { 0.0 } else { l.sqrt() });
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(sym(&s))
}

/// Precomputed passive output `yᵢ = x★ᵀ (Bᵢᵀ P) x`.
#[derive(Debug, Clone)]
pub struct PassiveOutputMap {
    n: usize,
    /// `Gᵢ = Bᵢᵀ P`, column-major.
    g: Vec<DMatrix<f64>>,
}

impl PassiveOutputMap {
    pub fn new(p: &DMatrix<f64>, b: &[DMatrix<f64>]) -> Self {
        Self {
            n: p.nrows(),
            g: b.iter().map(|bi| bi.transpose() * p).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.g.len()
    }

    pub fn eval_into(&self, x_star: &[f64], x: &[f64], y: &mut [f64]) {
        for (yi, gi) in y.iter_mut().zip(&self.g) {
            *yi = bilinear_form(gi, x_star, x, self.n);
        }
    }

    /// `C(x★)`, the `m × n` matrix with rows `x★ᵀ Bᵢᵀ P`.
    pub fn c_matrix(&self, x_star: &[f64]) -> DMatrix<f64> {
        let xs = DVector::from_column_slice(x_star);
        let mut c = DMatrix::zeros(self.g.len(), self.n);
        for (i, gi) in self.g.iter().enumerate() {
            c.set_row(i, &(xs.transpose() * gi));
        }
        c
    }
}

fn bilinear_form(g: &DMatrix<f64>, left: &[f64], right: &[f64], n: usize) -> f64 {
    let s = g.as_slice();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += left[i] * s[j * n + i];
        }
        acc += col * right[j];
    }
    acc
}

/// `yᵢ = x★ᵀ Bᵢᵀ P x` for every input channel.
pub fn passive_output(
    p: &DMatrix<f64>,
    b: &[DMatrix<f64>],
    x_star: &[f64],
    x: &[f64],
) -> Result<DVector<f64>> {
    let n = p.nrows();
    if x_star.len() != n || x.len() != n || b.iter().any(|bi| bi.shape() != (n, n)) {
        return Err(Error::Dimension(format!(
            "passive output expects n = {n} (x★: {}, x: {})",
            x_star.len(),
            x.len()
        )));
    }
    let map = PassiveOutputMap::new(p, b);
    let mut y = DVector::zeros(b.len());
    map.eval_into(x_star, x, y.as_mut_slice());
    Ok(y)
}

/// Outcome of the tracking rank test at one reference point.
#[derive(Debug, Clone)]
pub struct RankReport {
    /// `[C(x★); Q^{1/2}]`, `(m + n) × n`.
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub min_singular_value: f64,
    pub singular_values: Vec<f64>,
}

impl RankReport {
    pub fn is_full(&self) -> bool {
        self.rank == self.matrix.ncols()
    }
}

/// Stacks `C(x★)` over `Q^{1/2}` and counts singular values above
/// `rank_tol · σ_max`.
pub fn tracking_rank_matrix(
    p: &DMatrix<f64>,
    b: &[DMatrix<f64>],
    q_sqrt: &DMatrix<f64>,
    x_star: &[f64],
    rank_tol: f64,
) -> Result<RankReport> {
    let n = p.nrows();
    if q_sqrt.shape() != (n, n) || x_star.len() != n {
        return Err(Error::Dimension(format!(
            "rank test expects n = {n} (Q½: {}x{}, x★: {})",
            q_sqrt.nrows(),
            q_sqrt.ncols(),
            x_star.len()
        )));
    }
    let c = PassiveOutputMap::new(p, b).c_matrix(x_star);
    Ok(rank_of_stack(c, q_sqrt, rank_tol))
}

pub(crate) fn rank_of_stack(c: DMatrix<f64>, q_sqrt: &DMatrix<f64>, rank_tol: f64) -> RankReport {
    let m = c.nrows();
    let n = q_sqrt.ncols();
    let mut stack = DMatrix::zeros(m + n, n);
    stack.rows_mut(0, m).copy_from(&c);
    stack.rows_mut(m, n).copy_from(q_sqrt);
    let mut sv: Vec<f64> = stack.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let rank = if sigma_max > 0.0 {
        sv.iter().filter(|&&s| s > rank_tol * sigma_max).count()
    } else {
        0
    };
    RankReport {
        matrix: stack,
        rank,
        min_singular_value: sv.last().copied().unwrap_or(0.0),
        singular_values: sv,
    }
}

/// Reference values at one instant: `x★`, `ẋ★`, `u★`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoint {
    pub x_star: DVector<f64>,
    pub x_star_dot: DVector<f64>,
    pub u_star: DVector<f64>,
}

/// A time-indexed admissible-trajectory candidate.
pub trait ReferenceFrame {
    fn sample(&self, t: f64) -> ReferencePoint;
}

/// Constant reference `x★`, `u★` with `ẋ★ = 0`.
#[derive(Debug, Clone)]
pub struct ConstantReference {
    pub x_star: DVector<f64>,
    pub u_star: DVector<f64>,
}

impl ReferenceFrame for ConstantReference {
    fn sample(&self, _t: f64) -> ReferencePoint {
        ReferencePoint {
            x_star: self.x_star.clone(),
            x_star_dot: DVector::zeros(self.x_star.len()),
            u_star: self.u_star.clone(),
        }
    }
}

impl<F> ReferenceFrame for F
where
    F: Fn(f64) -> ReferencePoint,
{
    fn sample(&self, t: f64) -> ReferencePoint {
        self(t)
    }
}

/// `ẋ★ − A x★ − d − Σ u★ᵢ Bᵢ x★` at time `t`.
pub fn admissibility_residual(
    sys: &BilinearSystem,
    reference: &dyn ReferenceFrame,
    t: f64,
) -> Result<DVector<f64>> {
    residual_at(sys, &reference.sample(t), t)
}

pub fn residual_at(sys: &BilinearSystem, point: &ReferencePoint, t: f64) -> Result<DVector<f64>> {
    let n = sys.n();
    if point.x_star.len() != n || point.x_star_dot.len() != n || point.u_star.len() != sys.m() {
        return Err(Error::Dimension("reference point does not match system".into()));
    }
    let mut f = vec![0.0; n];
    sys.vector_field(t, point.x_star.as_slice(), point.u_star.as_slice(), &mut f);
    Ok(&point.x_star_dot - DVector::from_vec(f))
}

/// Searches for a diagonal certificate.
///
/// The first diagonal entry is pinned to one (the conditions are scale
/// invariant) and the remaining log-entries are updated one coordinate at a
/// time: a log-spaced scan brackets the minimum of
/// `Σ‖sym(PBᵢ)‖²_F + max(0, λ_max(sym(PA)))²`, then a golden-section pass
/// refines it. The best `P` found is returned through
/// [`verify_storage_certificate`], so callers must still check `is_valid`.
pub fn search_diagonal_certificate(sys: &BilinearSystem, tol: f64) -> Result<StorageCertificate> {
    let n = sys.n();
    let mut theta = vec![0.0_f64; n];
    let objective = |th: &[f64]| -> f64 {
        let p = DMatrix::from_diagonal(&DVector::from_iterator(n, th.iter().map(|v| v.exp())));
        let mut f: f64 = sys.b().iter().map(|b| sym(&(&p * b)).norm_squared()).sum();
        let pa_max = eigenvalues(&sym(&(&p * sys.a()))).max();
        if pa_max > 0.0 {
            f += pa_max * pa_max;
        }
        f
    };

    let mut best = objective(&theta);
    for _round in 0..200 {
        if best < 1e-30 || n < 2 {
            break;
        }
        let before = best;
        for k in 1..n {
            let eval = |v: f64, th: &mut Vec<f64>| {
                let old = th[k];
                th[k] = v;
                let f = objective(th);
                th[k] = old;
                f
            };
            // bracket on a log grid around the current value
            let center = theta[k];
            let step = 0.25;
            let (mut arg, mut val) = (center, best);
            for s in -80..=80 {
                let v = center + step * s as f64;
                let f = eval(v, &mut theta);
                if f < val {
                    arg = v;
                    val = f;
                }
            }
            let (mut lo, mut hi) = (arg - step, arg + step);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let mut c = hi - g * (hi - lo);
            let mut d = lo + g * (hi - lo);
            let mut fc = eval(c, &mut theta);
            let mut fd = eval(d, &mut theta);
            for _ in 0..80 {
                if fc < fd {
                    hi = d;
                    d = c;
                    fd = fc;
                    c = hi - g * (hi - lo);
                    fc = eval(c, &mut theta);
                } else {
                    lo = c;
                    c = d;
                    fc = fd;
                    d = lo + g * (hi - lo);
                    fd = eval(d, &mut theta);
                }
            }
            let mid = 0.5 * (lo + hi);
            let fm = eval(mid, &mut theta);
            if fm < val {
                arg = mid;
                val = fm;
            }
            if val < best {
                theta[k] = arg;
                best = val;
            }
        }
        if best >= before * (1.0 - 1e-12) {
            break;
        }
    }
    let p = DMatrix::from_diagonal(&DVector::from_iterator(n, theta.iter().map(|v| v.exp())));
    verify_storage_certificate(sys, &p, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn boost(l: f64, c: f64, r: f64) -> BilinearSystem {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0 / (r * c)]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, -2.0 / l, 1.0 / c, 0.0]);
        BilinearSystem::new(a, vec![b], Disturbance::Zero).unwrap()
    }

    #[test]
    fn boost_certificate_is_valid_with_known_p() {
        let (l, c, r) = (56e-6, 3047e-6, 22.0);
        let sys = boost(l, c, r);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![l / 2.0, c]));
        let cert = verify_storage_certificate(&sys, &p, DEFAULT_CERT_TOL).unwrap();
        assert!(cert.is_valid());
        let q = cert.q().unwrap();
        assert_relative_eq!(q[(0, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(q[(1, 1)], 1.0 / 22.0, max_relative = 1e-12);
        assert_relative_eq!(q[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn boost_certificate_fails_with_identity() {
        let (l, c) = (56e-6, 3047e-6);
        let sys = boost(l, c, 22.0);
        let cert = verify_storage_certificate(&sys, &DMatrix::identity(2, 2), DEFAULT_CERT_TOL).unwrap();
        assert!(!cert.is_valid());
        assert!(cert.q().is_none());
        // sym(B) has off-diagonal (1/C − 2/L)/2 in two places
        let off = (1.0 / c - 2.0 / l).abs() / 2.0;
        assert_relative_eq!(cert.residuals().pb_sym_norms[0], off * 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn identity_certificate_for_dissipative_skew_system() {
        let a = -DMatrix::<f64>::identity(3, 3);
        let b = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, -2.0, -1.0, 0.0, 0.5, 2.0, -0.5, 0.0]);
        let sys = BilinearSystem::new(a, vec![b], Disturbance::Zero).unwrap();
        let cert = verify_storage_certificate(&sys, &DMatrix::identity(3, 3), DEFAULT_CERT_TOL).unwrap();
        assert!(cert.is_valid());
        assert_relative_eq!(cert.q().unwrap(), &DMatrix::identity(3, 3), epsilon = 1e-15);
        assert_relative_eq!(cert.q_sqrt().unwrap(), &DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn certificate_rejects_bad_shapes_and_asymmetry() {
        let sys = boost(1.0, 1.0, 1.0);
        assert!(matches!(
            verify_storage_certificate(&sys, &DMatrix::identity(3, 3), 1e-9),
            Err(Error::Dimension(_))
        ));
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            verify_storage_certificate(&sys, &p, 1e-9),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn system_constructor_validates() {
        let a = DMatrix::<f64>::zeros(2, 3);
        assert!(BilinearSystem::new(a, vec![], Disturbance::Zero).is_err());
        let a = DMatrix::<f64>::zeros(1, 1);
        let b = vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)];
        assert!(BilinearSystem::new(a, b, Disturbance::Zero).is_err());
        let a = DMatrix::from_element(1, 1, f64::NAN);
        assert!(BilinearSystem::new(a, vec![], Disturbance::Zero).is_err());
    }

    #[test]
    fn psd_sqrt_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0 / 22.0]));
        let s = psd_sqrt(&d, 1e-12).unwrap();
        assert_relative_eq!(s[(1, 1)], 0.213_200_716_355_610_7, max_relative = 1e-12);
        assert_relative_eq!(s[(0, 0)], 0.0, epsilon = 1e-15);

        let i = DMatrix::<f64>::identity(4, 4);
        assert_relative_eq!(psd_sqrt(&i, 1e-12).unwrap(), i, epsilon = 1e-14);

        // eigen-oracle: eigenvalues {3, 1}, vectors (1,1)/√2 and (1,−1)/√2
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = psd_sqrt(&m, 1e-12).unwrap();
        let (hi, lo) = (3f64.sqrt(), 1.0);
        assert_relative_eq!(s[(0, 0)], (hi + lo) / 2.0, max_relative = 1e-12);
        assert_relative_eq!(s[(0, 1)], (hi - lo) / 2.0, max_relative = 1e-12);
        assert_relative_eq!(&s * &s, m, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_clamps_tiny_negatives_and_rejects_real_ones() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-14]));
        let s = psd_sqrt(&m, 1e-12).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        assert!(matches!(psd_sqrt(&m, 1e-12), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn boost_passive_output_matches_closed_form() {
        let (l, c) = (56e-6, 3047e-6);
        let sys = boost(l, c, 22.0);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![l / 2.0, c]));
        let y = passive_output(&p, sys.b(), &[1.0, 15.0], &[2.0, 15.0]).unwrap();
        // x1★ x2 − x2★ x1
        assert_relative_eq!(y[0], -15.0, max_relative = 1e-12);
        let y = passive_output(&p, sys.b(), &[1.3, 15.0], &[1.3, 15.0]).unwrap();
        assert_relative_eq!(y[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_test_boost_and_degenerate_reference() {
        let (l, c, r) = (56e-6, 3047e-6, 22.0);
        let sys = boost(l, c, r);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![l / 2.0, c]));
        let cert = verify_storage_certificate(&sys, &p, DEFAULT_CERT_TOL).unwrap();
        let rep = tracking_rank_matrix(&p, sys.b(), cert.q_sqrt().unwrap(), &[1.0, 15.0], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.rank, 2);
        assert!(rep.is_full());
        // C = [−x2★, x1★]
        assert_relative_eq!(rep.matrix[(0, 0)], -15.0, max_relative = 1e-12);
        assert_relative_eq!(rep.matrix[(0, 1)], 1.0, max_relative = 1e-12);

        let rep0 = tracking_rank_matrix(&p, sys.b(), cert.q_sqrt().unwrap(), &[0.0, 0.0], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep0.rank, 1);
    }

    #[test]
    fn residual_of_exact_equilibrium_vanishes() {
        let (l, c, r, e) = (56e-6, 3047e-6, 22.0, 9.0);
        let d = Disturbance::Constant(DVector::from_vec(vec![2.0 * e / l, 0.0]));
        let sys = boost(l, c, r).with_disturbance(d);
        let u = e / 15.0;
        let reference = ConstantReference {
            x_star: DVector::from_vec(vec![15.0 / (r * u), 15.0]),
            u_star: DVector::from_vec(vec![u]),
        };
        let res = admissibility_residual(&sys, &reference, 0.0).unwrap();
        let scale = 2.0 * e / l;
        assert!(res.amax() < 1e-9 * scale, "{res}");
    }

    #[test]
    fn zero_reference_residual_is_zero() {
        let sys = boost(1.0, 1.0, 1.0);
        let reference = ConstantReference {
            x_star: DVector::zeros(2),
            u_star: DVector::zeros(1),
        };
        assert_eq!(admissibility_residual(&sys, &reference, 3.0).unwrap().amax(), 0.0);
    }

    #[test]
    fn diagonal_search_recovers_boost_certificate() {
        let (l, c, r) = (56e-6, 3047e-6, 22.0);
        let sys = boost(l, c, r);
        let cert = search_diagonal_certificate(&sys, DEFAULT_CERT_TOL).unwrap();
        assert!(cert.is_valid(), "{:?}", cert.residuals());
        let ratio = cert.p()[(1, 1)] / cert.p()[(0, 0)];
        assert_relative_eq!(ratio, 2.0 * c / l, max_relative = 1e-6);
    }
}
