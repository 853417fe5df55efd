//! Shear-driven experiments: constant simple shear, and the planar pipeline
//! that works in a logarithmic clock where the drift splits into a constant
//! part plus an exponentially dying perturbation. The mass factor swallowed
//! by that split is carried analytically, so particles always represent the
//! normalized law and no birth/death weighting is needed.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::kernel::CutoffKernel;
use crate::moments::probe_radius;
use crate::ode;
use crate::particles::{DriftModel, Ensemble, RateScale};
use crate::quad;
use crate::selfsimilar::{
    find_profile, stability_run, stability_trajectory, ProfileParams, ProfileResult,
    StabilityParams, StabilityResult,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShearKind {
    Simple,
    Planar,
}

/// Drift scenario in the rescaled clock: constant generator A plus the
/// decaying perturbation B(tau) = e^{-tau} R, with the whole right-hand side
/// divided by the rescaling constant M. Simple shear has A12 = shear_rate
/// and no perturbation; the planar family has A23 = shear_rate, A33 = 1.
#[derive(Clone, Debug)]
pub struct ShearScenario {
    kind: ShearKind,
    shear_rate: f64,
    m_rescale: f64,
    b_amplitude: Matrix3<f64>,
}

/// Drift decomposition at one physical time.
#[derive(Clone, Copy, Debug)]
pub struct DriftSplit {
    pub tau: f64,
    pub a_over_m: Matrix3<f64>,
    pub b_tau: Matrix3<f64>,
}

/// Mass factor and frame matrix at one clock reading.
#[derive(Clone, Copy, Debug)]
pub struct FrameState {
    pub tau: f64,
    pub t_physical: f64,
    pub mass: f64,
    pub frame: Matrix3<f64>,
}

/// Full output of a shear run: the effective profile, the stability
/// trajectory in the rescaled clock, and the frame bookkeeping at the
/// observation times.
#[derive(Clone, Debug)]
pub struct ShearReport {
    pub mass_limit: f64,
    pub profile: ProfileResult,
    pub stability: StabilityResult,
    pub frames: Vec<FrameState>,
}

impl ShearScenario {
    pub fn simple(shear_rate: f64, m_rescale: f64) -> Result<Self> {
        Self::build(ShearKind::Simple, shear_rate, m_rescale, Matrix3::zeros())
    }

    pub fn planar(shear_rate: f64, m_rescale: f64, b_amplitude: Matrix3<f64>) -> Result<Self> {
        Self::build(ShearKind::Planar, shear_rate, m_rescale, b_amplitude)
    }

    fn build(
        kind: ShearKind,
        shear_rate: f64,
        m_rescale: f64,
        b_amplitude: Matrix3<f64>,
    ) -> Result<Self> {
        if !shear_rate.is_finite() {
            return Err(Error::InvalidParam(format!(
                "shear rate must be finite, got {shear_rate}"
            )));
        }
        if !(m_rescale > 0.0 && m_rescale.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "rescaling constant must be positive, got {m_rescale}"
            )));
        }
        if b_amplitude.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParam(
                "perturbation amplitude must have finite entries".into(),
            ));
        }
        Ok(ShearScenario { kind, shear_rate, m_rescale, b_amplitude })
    }

    pub fn kind(&self) -> ShearKind {
        self.kind
    }

    pub fn shear_rate(&self) -> f64 {
        self.shear_rate
    }

    pub fn m_rescale(&self) -> f64 {
        self.m_rescale
    }

    pub fn b_amplitude(&self) -> &Matrix3<f64> {
        &self.b_amplitude
    }

    /// The constant part of the drift generator (before division by M).
    pub fn constant_drift(&self) -> Matrix3<f64> {
        let mut a = Matrix3::zeros();
        match self.kind {
            ShearKind::Simple => a[(0, 1)] = self.shear_rate,
            ShearKind::Planar => {
                a[(1, 2)] = self.shear_rate;
                a[(2, 2)] = 1.0;
            }
        }
        a
    }

    /// Perturbation at clock reading tau: e^{-tau} R.
    pub fn b_at(&self, tau: f64) -> Matrix3<f64> {
        self.b_amplitude * (-tau).exp()
    }

    /// Closed-form mass factor exp(-tr R (1 - e^{-tau}) / M).
    pub fn mass_factor(&self, tau: f64) -> f64 {
        (-self.b_amplitude.trace() * (1.0 - (-tau).exp()) / self.m_rescale).exp()
    }

    /// Terminal mass factor exp(-tr R / M).
    pub fn mass_limit(&self) -> f64 {
        (-self.b_amplitude.trace() / self.m_rescale).exp()
    }

    /// Clock reading for a physical time: tau = M log(1 + t).
    pub fn log_clock(&self, t_physical: f64) -> Result<f64> {
        if !(t_physical >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "physical time must be nonnegative, got {t_physical}"
            )));
        }
        Ok(self.m_rescale * t_physical.ln_1p())
    }

    /// Physical time for a clock reading: t = e^{tau/M} - 1.
    pub fn physical_time(&self, tau: f64) -> f64 {
        (tau / self.m_rescale).exp_m1()
    }

    /// Drift decomposition at a physical time: the clock reading, the
    /// constant part A/M, and the perturbation at that reading.
    pub fn planar_transform(&self, t_physical: f64) -> Result<DriftSplit> {
        let tau = self.log_clock(t_physical)?;
        Ok(DriftSplit {
            tau,
            a_over_m: self.constant_drift() / self.m_rescale,
            b_tau: self.b_at(tau),
        })
    }
}

/// Integrate the mass factor and the frame matrix over a clock grid
/// (nonnegative, strictly increasing). The mass uses adaptive quadrature of
/// tr B; the frame solves E' = (A + B(tau)) E / M from E(0) = I.
pub fn evolve_frame(scenario: &ShearScenario, tau_grid: &[f64]) -> Result<Vec<FrameState>> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidParam("clock grid must be nonempty".into()));
    }
    if !(tau_grid[0] >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "clock grid must start at or after 0, got {}",
            tau_grid[0]
        )));
    }
    for w in tau_grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidParam("clock grid must be strictly increasing".into()));
        }
    }
    let m = scenario.m_rescale;

    let mut masses = Vec::with_capacity(tau_grid.len());
    let mut acc = 0.0;
    let mut prev = 0.0;
    for &tau in tau_grid {
        if tau > prev {
            acc += quad::adaptive(|u| scenario.b_at(u).trace(), prev, tau, 1e-13, 1e-11)?.value;
            prev = tau;
        }
        masses.push((-acc / m).exp());
    }

    let a = scenario.constant_drift();
    let r = scenario.b_amplitude;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let e = Matrix3::from_row_slice(y);
        let de = (a + r * (-t).exp()) * e / m;
        for i in 0..3 {
            for j in 0..3 {
                dy[3 * i + j] = de[(i, j)];
            }
        }
    };
    let y0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let rows = ode::integrate(rhs, 0.0, &y0, tau_grid, 1e-11, 1e-13)?;

    Ok(tau_grid
        .iter()
        .zip(masses)
        .zip(rows)
        .map(|((&tau, mass), row)| FrameState {
            tau,
            t_physical: scenario.physical_time(tau),
            mass,
            frame: Matrix3::from_row_slice(&row),
        })
        .collect())
}

/// Effective constant drift and kernel of the limit dynamics: A/M, and the
/// base kernel scaled by m_inf/M. Rejects rates beyond the probed admissible
/// radius (capped at the effective mean rate, half the spectral gap).
fn effective_parts(
    scenario: &ShearScenario,
    kernel: &CutoffKernel,
) -> Result<(Matrix3<f64>, CutoffKernel)> {
    let a_eff = scenario.constant_drift() / scenario.m_rescale;
    let kernel_eff = kernel.scaled(scenario.mass_limit() / scenario.m_rescale)?;
    let norm = a_eff.norm();
    if norm > 0.0 {
        let cap = kernel_eff.bbar();
        let radius = probe_radius(kernel_eff.bbar(), &a_eff, cap)?;
        if norm > radius {
            return Err(Error::NonAdmissible(format!(
                "drift strength {norm} exceeds the probed admissible radius {radius}"
            )));
        }
    }
    Ok((a_eff, kernel_eff))
}

/// Run the full shear pipeline: compute the profile of the limit dynamics,
/// then the stability trajectory of `f0` in the rescaled clock. Without a
/// perturbation this delegates verbatim to the constant-drift pipeline; with
/// one, the drift becomes (A + e^{-tau} R)/M and the collision rate carries
/// the analytically known mass factor, normalized to its limit.
pub fn run_shear_decay(
    scenario: &ShearScenario,
    kernel: &CutoffKernel,
    f0: Ensemble,
    k_scale: f64,
    profile_params: &ProfileParams,
    stability_params: &StabilityParams,
) -> Result<ShearReport> {
    if f0.time() != 0.0 {
        return Err(Error::InvalidParam(format!(
            "initial ensemble must start at time 0, got {}",
            f0.time()
        )));
    }
    let (a_eff, kernel_eff) = effective_parts(scenario, kernel)?;
    let profile = find_profile(&a_eff, &kernel_eff, k_scale, profile_params)?;
    let mass_limit = scenario.mass_limit();
    let stability = if scenario.b_amplitude == Matrix3::zeros() {
        stability_run(f0, &a_eff, &kernel_eff, &profile, stability_params)?
    } else {
        let m = scenario.m_rescale;
        let a = scenario.constant_drift();
        let r = scenario.b_amplitude;
        let drift = DriftModel::Varying(Box::new(move |tau| (a + r * (-tau).exp()) / m));
        let sc = scenario.clone();
        let rate = RateScale::Varying(Box::new(move |tau| sc.mass_factor(tau) / mass_limit));
        stability_trajectory(f0, drift, rate, &kernel_eff, &profile, stability_params)?
    };
    let taus: Vec<f64> = stability.d2_series.iter().map(|p| p.0).collect();
    let frames = evolve_frame(scenario, &taus)?;
    Ok(ShearReport { mass_limit, profile, stability, frames })
}

/// Constant simple shear: the same pipeline with no clock change beyond the
/// optional M-rescaling, since the drift is traceless and unperturbed.
pub fn simple_shear_entry(
    scenario: &ShearScenario,
    kernel: &CutoffKernel,
    f0: Ensemble,
    k_scale: f64,
    profile_params: &ProfileParams,
    stability_params: &StabilityParams,
) -> Result<ShearReport> {
    if scenario.kind != ShearKind::Simple {
        return Err(Error::InvalidParam(
            "simple-shear entry requires a simple scenario".into(),
        ));
    }
    run_shear_decay(scenario, kernel, f0, k_scale, profile_params, stability_params)
}
