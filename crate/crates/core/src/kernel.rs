//! Angular collision kernels for Maxwell-type interactions.
//!
//! A kernel is the angular weight b(cos t) of a velocity-isotropic collision
//! operator. The physically interesting family concentrates at grazing angles:
//! sin(t) * b(cos t) * t^(1+2*kappa) -> strength as t -> 0, with
//! kappa in (0, 1), so the total scattering rate diverges while the
//! second-moment constants stay finite. All quadrature here works with the
//! combination b(cos t) * sin(t), which is the density of scattering angle
//! on (0, pi] and stays integrable through both endpoints.

use crate::error::{Error, Result};
use crate::quad::{self, DEFAULT_ABS_TOL, DEFAULT_REL_TOL};
use nalgebra::Vector3;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Nodes in the inverse-CDF scattering table.
pub const SCATTER_NODES: usize = 4096;

/// Below this angle the eigenvalue bracket switches to its series form.
pub const BRACKET_TAYLOR_SWITCH: f64 = 1e-3;

/// Left cut for full-range integrals of grazing-singular kernels; the
/// remainder below it is added back in closed form from the power asymptote.
const SINGULAR_THETA_LO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum KernelForm {
    /// b(cos t) * sin t = strength * t^(-1-2*kappa): grazing singularity that
    /// saturates the defining asymptote exactly.
    PowerLaw,
    /// b identically equal to `strength`.
    Constant,
    /// Piecewise-linear b on a grid of angles; zero outside the tabulated
    /// range. Test/diagnostic form, not part of the config schema.
    Tabulated { thetas: Vec<f64>, b_values: Vec<f64> },
}

/// Angular kernel with its singularity parameters.
#[derive(Clone, Debug)]
pub struct Kernel {
    form: KernelForm,
    kappa: f64,
    strength: f64,
}

/// The two angular functionals that control second moments:
/// `lambda_cap` = integral of sin(t) b(cos t) t^2 dt (finite for kappa < 1),
/// `bbar` = (3 pi / 4) * integral of b(cos t) sin^3(t) dt.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AngularConstants {
    pub lambda_cap: f64,
    pub bbar: f64,
}

fn validate_kappa_strength(kappa: f64, strength: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidParam(format!(
            "kappa must lie strictly in (0, 1), got {kappa}"
        )));
    }
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "strength must be positive and finite, got {strength}"
        )));
    }
    Ok(())
}

impl Kernel {
    pub fn power_law(kappa: f64, strength: f64) -> Result<Self> {
        validate_kappa_strength(kappa, strength)?;
        Ok(Kernel { form: KernelForm::PowerLaw, kappa, strength })
    }

    /// Constant angular weight b = value. The singularity exponent is
    /// irrelevant here; it is pinned to 1/2 so every kernel serializes the
    /// same set of fields.
    pub fn constant(value: f64) -> Result<Self> {
        validate_kappa_strength(0.5, value)?;
        Ok(Kernel { form: KernelForm::Constant, kappa: 0.5, strength: value })
    }

    /// Tabulated b at increasing angles in (0, pi]; linear interpolation in
    /// between and zero outside.
    pub fn tabulated(kappa: f64, strength: f64, points: &[(f64, f64)]) -> Result<Self> {
        validate_kappa_strength(kappa, strength)?;
        if points.len() < 2 {
            return Err(Error::InvalidParam("tabulated kernel needs at least 2 points".into()));
        }
        let mut thetas = Vec::with_capacity(points.len());
        let mut b_values = Vec::with_capacity(points.len());
        for &(t, b) in points {
            if !(t > 0.0 && t <= PI) {
                return Err(Error::InvalidParam(format!("tabulated angle {t} outside (0, pi]")));
            }
            if let Some(&prev) = thetas.last() {
                if t <= prev {
                    return Err(Error::InvalidParam("tabulated angles must be strictly increasing".into()));
                }
            }
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidParam(format!("tabulated value {b} must be finite and >= 0")));
            }
            thetas.push(t);
            b_values.push(b);
        }
        Ok(Kernel { form: KernelForm::Tabulated { thetas, b_values }, kappa, strength })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    /// True when the full-range scattering rate diverges at grazing angles.
    pub fn is_singular(&self) -> bool {
        matches!(self.form, KernelForm::PowerLaw)
    }

    /// The angle density b(cos t) * sin t.
    pub fn b_sin_theta(&self, theta: f64) -> f64 {
        match &self.form {
            KernelForm::PowerLaw => self.strength * theta.powf(-1.0 - 2.0 * self.kappa),
            KernelForm::Constant => self.strength * theta.sin(),
            KernelForm::Tabulated { thetas, b_values } => {
                if theta < thetas[0] || theta > *thetas.last().unwrap() {
                    return 0.0;
                }
                let j = thetas.partition_point(|&t| t <= theta).min(thetas.len() - 1);
                let (j0, j1) = (j - 1, j);
                let w = (theta - thetas[j0]) / (thetas[j1] - thetas[j0]);
                let b = b_values[j0] * (1.0 - w) + b_values[j1] * w;
                b * theta.sin()
            }
        }
    }

    fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParam(format!("scale factor must be positive, got {c}")));
        }
        let mut k = self.clone();
        k.strength *= c;
        if let KernelForm::Tabulated { b_values, .. } = &mut k.form {
            for b in b_values {
                *b *= c;
            }
        }
        Ok(k)
    }

    /// Lowest angle carrying any weight.
    fn support_lo(&self) -> f64 {
        match &self.form {
            KernelForm::Tabulated { thetas, .. } => thetas[0],
            _ => 0.0,
        }
    }

    /// Integrate b_sin_theta(t) * w(t) over the full range (0, pi]. For
    /// grazing-singular kernels the piece below SINGULAR_THETA_LO is added
    /// back via `tail`, the closed-form integral of the power asymptote
    /// against the leading behavior of w.
    fn full_range_integral<W, T>(&self, w: W, tail: T) -> Result<f64>
    where
        W: Fn(f64) -> f64,
        T: Fn(f64) -> f64,
    {
        if self.is_singular() {
            let q = quad::adaptive_log(
                |t| self.b_sin_theta(t) * w(t),
                SINGULAR_THETA_LO,
                PI,
                DEFAULT_ABS_TOL,
                DEFAULT_REL_TOL,
            )?;
            Ok(q.value + tail(SINGULAR_THETA_LO))
        } else {
            let lo = self.support_lo();
            let q = if lo > 0.0 {
                quad::adaptive_log(|t| self.b_sin_theta(t) * w(t), lo, PI, DEFAULT_ABS_TOL, DEFAULT_REL_TOL)?
            } else {
                quad::adaptive(|t| self.b_sin_theta(t) * w(t), 0.0, PI, DEFAULT_ABS_TOL, DEFAULT_REL_TOL)?
            };
            Ok(q.value)
        }
    }

    /// Full-range angular constants. Always finite for kappa in (0, 1).
    pub fn angular_constants(&self) -> Result<AngularConstants> {
        let k2 = 2.0 - 2.0 * self.kappa;
        let strength = self.strength;
        let lambda_cap = self.full_range_integral(
            |t| t * t,
            |lo: f64| strength * lo.powf(k2) / k2,
        )?;
        let bbar = self.full_range_integral(
            |t| 0.75 * PI * t.sin().powi(2),
            |lo: f64| 0.75 * PI * strength * lo.powf(k2) / k2,
        )?;
        Ok(AngularConstants { lambda_cap, bbar })
    }

    /// Moment eigenvalue of order p >= 2 over the full angular range.
    pub fn lambda_p(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        let q = 0.5 * p;
        let k = self.kappa;
        let strength = self.strength;
        self.full_range_integral(
            |t| 2.0 * PI * bracket(t, q),
            |lo: f64| {
                // bracket ~ q * (t/2)^2 - (t/2)^(2q) to leading order
                let a = 2.0 * PI * strength * 0.25 * q * lo.powf(2.0 - 2.0 * k) / (2.0 - 2.0 * k);
                let b = 2.0 * PI * strength * 0.25f64.powf(q) * lo.powf(2.0 * q - 2.0 * k)
                    / (2.0 * q - 2.0 * k);
                a - b
            },
        )
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(Error::InvalidParam(format!("moment order p must satisfy p >= 2, got {p}")));
    }
    Ok(())
}

/// 1 - cos^p(t/2) - sin^p(t/2), written through omega = sin^2(t/2). Near zero
/// the two leading terms cancel; the series form keeps full precision there.
pub fn bracket(theta: f64, q: f64) -> f64 {
    let s = (0.5 * theta).sin().powi(2);
    if theta < BRACKET_TAYLOR_SWITCH {
        q * s - 0.5 * q * (q - 1.0) * s * s - s.powf(q)
    } else {
        1.0 - (1.0 - s).powf(q) - s.powf(q)
    }
}

/// Kernel with grazing angles removed below `theta_min`. Caches the three
/// rate constants of the truncated kernel.
#[derive(Clone, Debug)]
pub struct CutoffKernel {
    base: Kernel,
    theta_min: f64,
    s_n: f64,
    bbar_n: f64,
    lambda_cap_n: f64,
}

impl CutoffKernel {
    pub fn new(base: Kernel, theta_min: f64) -> Result<Self> {
        if !(theta_min > 0.0 && theta_min < PI) {
            return Err(Error::InvalidParam(format!(
                "theta_min must lie strictly in (0, pi), got {theta_min}"
            )));
        }
        let s_n = 2.0 * PI
            * quad::adaptive_log(|t| base.b_sin_theta(t), theta_min, PI, DEFAULT_ABS_TOL, DEFAULT_REL_TOL)?
                .value;
        let bbar_n = 0.75 * PI
            * quad::adaptive_log(
                |t| base.b_sin_theta(t) * t.sin().powi(2),
                theta_min,
                PI,
                DEFAULT_ABS_TOL,
                DEFAULT_REL_TOL,
            )?
            .value;
        let lambda_cap_n = quad::adaptive_log(
            |t| base.b_sin_theta(t) * t * t,
            theta_min,
            PI,
            DEFAULT_ABS_TOL,
            DEFAULT_REL_TOL,
        )?
        .value;
        Ok(CutoffKernel { base, theta_min, s_n, bbar_n, lambda_cap_n })
    }

    pub fn base(&self) -> &Kernel {
        &self.base
    }

    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }

    /// Total scattering rate S_n = 2 pi * integral of b sin over [theta_min, pi].
    pub fn total_rate(&self) -> f64 {
        self.s_n
    }

    pub fn bbar(&self) -> f64 {
        self.bbar_n
    }

    pub fn lambda_cap(&self) -> f64 {
        self.lambda_cap_n
    }

    pub fn angular_constants(&self) -> AngularConstants {
        AngularConstants { lambda_cap: self.lambda_cap_n, bbar: self.bbar_n }
    }

    /// Moment eigenvalue of the truncated kernel; increases to the full-range
    /// value as theta_min decreases.
    pub fn lambda_p(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        let q = 0.5 * p;
        let v = quad::adaptive_log(
            |t| 2.0 * PI * self.base.b_sin_theta(t) * bracket(t, q),
            self.theta_min,
            PI,
            DEFAULT_ABS_TOL,
            DEFAULT_REL_TOL,
        )?;
        Ok(v.value)
    }

    /// Same kernel with b multiplied by c > 0. Cached rates scale exactly.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Ok(CutoffKernel {
            base: self.base.scaled(c)?,
            theta_min: self.theta_min,
            s_n: self.s_n * c,
            bbar_n: self.bbar_n * c,
            lambda_cap_n: self.lambda_cap_n * c,
        })
    }
}

/// Inverse-CDF table for the scattering angle of a truncated kernel.
/// Node offsets from theta_min are geometric, so the left end is resolved at
/// a scale far below theta_min where the density peaks.
#[derive(Clone, Debug)]
pub struct ScatterTable {
    thetas: Vec<f64>,
    cdf: Vec<f64>,
}

impl ScatterTable {
    pub fn new(kernel: &CutoffKernel) -> Result<Self> {
        Self::with_nodes(kernel, SCATTER_NODES)
    }

    pub fn with_nodes(kernel: &CutoffKernel, n: usize) -> Result<Self> {
        if n < 16 {
            return Err(Error::InvalidParam("scatter table needs at least 16 nodes".into()));
        }
        let t0 = kernel.theta_min();
        let span = PI - t0;
        let delta_min = (t0 * 1e-3).min(span * 1e-6);
        let rho = (delta_min / span).powf(1.0 / (n as f64 - 2.0));
        let mut thetas = Vec::with_capacity(n);
        thetas.push(t0);
        for i in 1..n {
            let delta = span * rho.powi((n - 1 - i) as i32);
            thetas.push((t0 + delta).min(PI));
        }
        thetas[n - 1] = PI;

        // Cell masses by fixed-order Gauss-Legendre; cells are narrow enough
        // that the rule is effectively exact.
        let (gx, gw) = quad::gauss_legendre(8);
        let mut cdf = Vec::with_capacity(n);
        cdf.push(0.0);
        let mut acc = 0.0;
        for w in thetas.windows(2) {
            let (a, b) = (w[0], w[1]);
            let h = 0.5 * (b - a);
            let c = 0.5 * (a + b);
            let mut cell = 0.0;
            for (&x, &wq) in gx.iter().zip(&gw) {
                cell += wq * kernel.base().b_sin_theta(c + h * x);
            }
            cell *= h;
            if !(cell >= 0.0) {
                return Err(Error::InvalidParam("kernel density must be nonnegative".into()));
            }
            acc += cell;
            cdf.push(acc);
        }
        if !(acc > 0.0 && acc.is_finite()) {
            return Err(Error::InvalidParam("kernel carries no scattering mass above theta_min".into()));
        }
        for c in &mut cdf {
            *c /= acc;
        }
        cdf[n - 1] = 1.0;
        Ok(ScatterTable { thetas, cdf })
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Inverse CDF with linear interpolation. u in [0, 1).
    pub fn sample_theta(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0 - 1e-16);
        // index of the last cdf entry <= u
        let j = self.cdf.partition_point(|&c| c <= u) - 1;
        let j = j.min(self.thetas.len() - 2);
        let (c0, c1) = (self.cdf[j], self.cdf[j + 1]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.thetas[j] + w * (self.thetas[j + 1] - self.thetas[j])
    }

    /// Draw a post-collision direction around `axis`: polar angle from the
    /// table, azimuth uniform. Consumes exactly two uniforms from `rng`.
    pub fn sample_sigma<R: RngExt>(&self, rng: &mut R, axis: &Vector3<f64>) -> Result<Vector3<f64>> {
        let n2 = axis.norm();
        if !(n2 > 1e-300) {
            return Err(Error::DegenerateAxis);
        }
        let n = axis / n2;
        let theta = self.sample_theta(rng.random::<f64>());
        let phi = 2.0 * PI * rng.random::<f64>();
        // Orthonormal frame around n; seed axis avoids near-parallel picks.
        let seed = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
            Vector3::x()
        } else if n.y.abs() <= n.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let e1 = seed.cross(&n).normalize();
        let e2 = n.cross(&e1);
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Ok(n * ct + (e1 * cp + e2 * sp) * st)
    }
}

/// Serializable kernel description: exactly the fields of the config schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub form: String,
    pub kappa: f64,
    pub strength: f64,
    pub theta_min: f64,
}

impl KernelSpec {
    pub fn build(&self) -> Result<CutoffKernel> {
        let base = match self.form.as_str() {
            "power_law" => Kernel::power_law(self.kappa, self.strength)?,
            "constant" => {
                validate_kappa_strength(self.kappa, self.strength)?;
                Kernel::constant(self.strength)?
            }
            other => {
                return Err(Error::InvalidParam(format!(
                    "kernel.form must be \"power_law\" or \"constant\", got \"{other}\""
                )))
            }
        };
        CutoffKernel::new(base, self.theta_min)
    }

    pub fn from_cutoff(k: &CutoffKernel) -> Result<Self> {
        let form = match k.base().form() {
            KernelForm::PowerLaw => "power_law",
            KernelForm::Constant => "constant",
            KernelForm::Tabulated { .. } => {
                return Err(Error::InvalidParam("tabulated kernels have no config representation".into()))
            }
        };
        Ok(KernelSpec {
            form: form.into(),
            kappa: k.base().kappa(),
            strength: k.base().strength(),
            theta_min: k.theta_min(),
        })
    }
}
