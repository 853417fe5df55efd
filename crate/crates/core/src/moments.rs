//! Second-moment flow: the linear operator on symmetric 3x3 matrices that
//! combines a drift matrix with isotropic collisional relaxation, its leading
//! eigenpair, and exact or adaptively integrated trajectories.
//!
//! Matrices live in a fixed 6-vector coordinate basis (m11, m22, m33, m12,
//! m13, m23) with the off-diagonal components weighted by sqrt(2), so the
//! vector 2-norm equals the Frobenius norm of the matrix.

use crate::error::{Error, Result};
use crate::ode;
use nalgebra::{Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Symmetric 3x3 matrix of velocity second moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct SymMat3 {
    pub m11: f64,
    pub m22: f64,
    pub m33: f64,
    pub m12: f64,
    pub m13: f64,
    pub m23: f64,
}

impl From<[f64; 6]> for SymMat3 {
    fn from(a: [f64; 6]) -> Self {
        SymMat3 { m11: a[0], m22: a[1], m33: a[2], m12: a[3], m13: a[4], m23: a[5] }
    }
}

impl From<SymMat3> for [f64; 6] {
    fn from(m: SymMat3) -> Self {
        [m.m11, m.m22, m.m33, m.m12, m.m13, m.m23]
    }
}

impl SymMat3 {
    pub fn zeros() -> Self {
        SymMat3 { m11: 0.0, m22: 0.0, m33: 0.0, m12: 0.0, m13: 0.0, m23: 0.0 }
    }

    pub fn identity() -> Self {
        SymMat3 { m11: 1.0, m22: 1.0, m33: 1.0, m12: 0.0, m13: 0.0, m23: 0.0 }
    }

    /// Symmetrize an arbitrary 3x3 matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        SymMat3 {
            m11: m[(0, 0)],
            m22: m[(1, 1)],
            m33: m[(2, 2)],
            m12: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            m13: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            m23: 0.5 * (m[(1, 2)] + m[(2, 1)]),
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.m11, self.m12, self.m13,
            self.m12, self.m22, self.m23,
            self.m13, self.m23, self.m33,
        )
    }

    /// Coordinates in the weighted basis; 2-norm equals Frobenius norm.
    pub fn to_vec6(&self) -> Vector6<f64> {
        Vector6::new(self.m11, self.m22, self.m33, SQRT2 * self.m12, SQRT2 * self.m13, SQRT2 * self.m23)
    }

    pub fn from_vec6(v: &Vector6<f64>) -> Self {
        SymMat3 { m11: v[0], m22: v[1], m33: v[2], m12: v[3] / SQRT2, m13: v[4] / SQRT2, m23: v[5] / SQRT2 }
    }

    pub fn trace(&self) -> f64 {
        self.m11 + self.m22 + self.m33
    }

    pub fn frobenius(&self) -> f64 {
        self.to_vec6().norm()
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMat3 {
            m11: c * self.m11,
            m22: c * self.m22,
            m33: c * self.m33,
            m12: c * self.m12,
            m13: c * self.m13,
            m23: c * self.m23,
        }
    }

    pub fn add(&self, other: &SymMat3) -> Self {
        SymMat3 {
            m11: self.m11 + other.m11,
            m22: self.m22 + other.m22,
            m33: self.m33 + other.m33,
            m12: self.m12 + other.m12,
            m13: self.m13 + other.m13,
            m23: self.m23 + other.m23,
        }
    }

    /// Frobenius inner product tr(self * other).
    pub fn dot(&self, other: &SymMat3) -> f64 {
        self.to_vec6().dot(&other.to_vec6())
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        let e = self.to_matrix().symmetric_eigenvalues();
        let mut v = [e[0], e[1], e[2]];
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Positive semidefinite up to an eigenvalue slack of 1e-12 * scale.
    pub fn is_psd(&self) -> bool {
        let scale = 1.0 + self.frobenius();
        self.min_eigenvalue() >= -1e-12 * scale
    }
}

/// Right-hand side of the moment flow for a (possibly time-dependent)
/// effective drift D and collision strength alpha:
/// dM/dt = -D M - (D M)^T - 2 alpha (M - tr(M)/3 I).
pub fn moment_rhs(d: &Matrix3<f64>, alpha: f64, m: &Matrix3<f64>) -> Matrix3<f64> {
    let dm = d * m;
    let iso = Matrix3::identity() * (m.trace() / 3.0);
    -dm - dm.transpose() - 2.0 * alpha * (m - iso)
}

/// 6x6 matrix representation of the moment flow generator.
#[derive(Clone, Debug)]
pub struct MomentOperator {
    mat: Matrix6<f64>,
    alpha: f64,
    drift: Matrix3<f64>,
}

/// Leading eigenpair of a moment operator. `beta_bar` is half the leading
/// eigenvalue, `n_bar` the unit-Frobenius eigendirection with positive trace,
/// `gap` the distance from the leading real part to the rest of the spectrum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EigenReport {
    pub beta_bar: f64,
    #[serde(rename = "N_bar")]
    pub n_bar: SymMat3,
    pub gap: f64,
    pub simple: bool,
}

pub fn assemble_operator(alpha: f64, drift: &Matrix3<f64>) -> Result<MomentOperator> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParam(format!("collision strength alpha must be positive, got {alpha}")));
    }
    let mut mat = Matrix6::zeros();
    for j in 0..6 {
        let mut e = Vector6::zeros();
        e[j] = 1.0;
        let mj = SymMat3::from_vec6(&e).to_matrix();
        let col = SymMat3::from_matrix(&moment_rhs(drift, alpha, &mj)).to_vec6();
        mat.set_column(j, &col);
    }
    Ok(MomentOperator { mat, alpha, drift: *drift })
}

impl MomentOperator {
    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.mat
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn drift(&self) -> &Matrix3<f64> {
        &self.drift
    }

    /// Frobenius norm of the 6x6 representation; the scale used by the
    /// eigen tolerances.
    pub fn norm(&self) -> f64 {
        self.mat.norm()
    }

    pub fn apply(&self, m: &SymMat3) -> SymMat3 {
        SymMat3::from_vec6(&(self.mat * m.to_vec6()))
    }

    /// Eigenvalue with largest real part, its direction, and the spectral
    /// gap. The direction is recovered as the smallest singular vector of
    /// (op - lambda I), which is well conditioned exactly when the leading
    /// eigenvalue is simple.
    pub fn leading_eigenpair(&self) -> Result<EigenReport> {
        let scale = self.norm().max(f64::MIN_POSITIVE);
        let eig = self.mat.complex_eigenvalues();
        let mut parts: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
        parts.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (re1, im1) = parts[0];
        if im1.abs() > 1e-10 * scale {
            return Err(Error::ComplexLeading { imag: im1 });
        }
        let sep = re1 - parts[1].0;
        let tol = 1e-8 * scale;
        if sep < tol {
            return Err(Error::NonSimpleLeading { sep, tol });
        }
        let shifted = self.mat - Matrix6::identity() * re1;
        let svd = shifted.svd(true, true);
        let v_t = svd.v_t.as_ref().expect("svd requested with vectors");
        // row of V^T for the smallest singular value (nalgebra sorts descending)
        let mut idx = 0;
        let mut smin = f64::INFINITY;
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s < smin {
                smin = *s;
                idx = i;
            }
        }
        let mut v = v_t.row(idx).transpose();
        v /= v.norm();
        let mut n_bar = SymMat3::from_vec6(&v);
        if n_bar.trace() < 0.0 {
            n_bar = n_bar.scale(-1.0);
        }
        let residual = (self.mat * n_bar.to_vec6() - n_bar.to_vec6() * re1).norm();
        let res_tol = 1e-10 * scale;
        if residual > res_tol {
            return Err(Error::EigenResidual { res: residual, tol: res_tol });
        }
        Ok(EigenReport { beta_bar: 0.5 * re1, n_bar, gap: sep, simple: true })
    }
}

fn check_initial_moment(m0: &SymMat3) -> Result<()> {
    if !m0.is_psd() {
        return Err(Error::InvalidParam(format!(
            "initial moment matrix must be positive semidefinite (min eigenvalue {})",
            m0.min_eigenvalue()
        )));
    }
    Ok(())
}

/// Exact trajectory of the constant-coefficient moment flow via the matrix
/// exponential of the 6x6 generator; no time-stepping error.
pub fn integrate_moments(
    drift: &Matrix3<f64>,
    alpha: f64,
    m0: &SymMat3,
    t_grid: &[f64],
) -> Result<Vec<SymMat3>> {
    check_initial_moment(m0)?;
    let op = assemble_operator(alpha, drift)?;
    let v0 = m0.to_vec6();
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !t.is_finite() {
            return Err(Error::InvalidParam("time grid entries must be finite".into()));
        }
        let propagator = (op.mat * t).exp();
        out.push(SymMat3::from_vec6(&(propagator * v0)));
    }
    Ok(out)
}

/// Adaptive integration of the moment flow with a time-dependent extra drift
/// B(t) and collision strength alpha(t):
/// dM/dt = -(A + B_t) M - ((A + B_t) M)^T - 2 alpha_t (M - tr(M)/3 I).
pub fn integrate_perturbed_moments<FA, FB>(
    drift: &Matrix3<f64>,
    alpha_of_t: FA,
    b_of_t: FB,
    m0: &SymMat3,
    t_grid: &[f64],
) -> Result<Vec<SymMat3>>
where
    FA: Fn(f64) -> f64,
    FB: Fn(f64) -> Matrix3<f64>,
{
    check_initial_moment(m0)?;
    if t_grid.is_empty() {
        return Ok(Vec::new());
    }
    let y0: [f64; 6] = [0.0; 6].map(|_| 0.0);
    let mut y0 = y0;
    y0.copy_from_slice(m0.to_vec6().as_slice());
    let t0 = t_grid[0].min(0.0);
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let m = SymMat3::from_vec6(&Vector6::from_column_slice(y)).to_matrix();
        let d = drift + b_of_t(t);
        let dm = SymMat3::from_matrix(&moment_rhs(&d, alpha_of_t(t), &m)).to_vec6();
        dy.copy_from_slice(dm.as_slice());
    };
    let rows = ode::integrate(rhs, t0, &y0, t_grid, 1e-10, 1e-12)?;
    Ok(rows
        .into_iter()
        .map(|r| SymMat3::from_vec6(&Vector6::from_column_slice(&r)))
        .collect())
}

/// Empirical admissible radius along a drift direction: the largest scaling
/// s (in Frobenius norm units, the direction is normalized internally) for
/// which the leading eigenpair stays simple, real, and positive definite.
/// Bisection down to a relative width of 1e-3.
pub fn probe_radius(alpha: f64, direction: &Matrix3<f64>, s_max: f64) -> Result<f64> {
    let norm = direction.norm();
    if !(norm > 0.0) {
        return Err(Error::InvalidParam("probe direction must be nonzero".into()));
    }
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(Error::InvalidParam(format!("s_max must be positive, got {s_max}")));
    }
    let dir = direction / norm;
    let admissible = |s: f64| -> Result<bool> {
        let op = assemble_operator(alpha, &(dir * s))?;
        match op.leading_eigenpair() {
            Ok(rep) => Ok(rep.n_bar.min_eigenvalue() > 0.0),
            Err(Error::NonSimpleLeading { .. }) | Err(Error::ComplexLeading { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    if admissible(s_max)? {
        return Ok(s_max);
    }
    let mut lo = 0.0;
    let mut hi = s_max;
    while hi - lo > 1e-3 * s_max {
        let mid = 0.5 * (lo + hi);
        if admissible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
