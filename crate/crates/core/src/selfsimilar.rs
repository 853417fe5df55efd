//! Long-time experiments in rescaled variables: computing the self-similar
//! profile as the terminal state of the drift-compensated dynamics, and
//! measuring the d2 convergence rate of generic data toward it.

use crate::error::{Error, Result};
use crate::fourier::{d2, ecf, ecf_scaled, CharGrid, KGrid};
use crate::kernel::{CutoffKernel, ScatterTable};
use crate::moments::{assemble_operator, SymMat3};
use crate::particles::{
    init_ensemble, run, DriftModel, Ensemble, InitialData, RateScale, RunSpec,
};
use crate::stats::linreg;
use nalgebra::{Matrix3, Vector3};
use std::sync::Arc;

/// Particle and diagnostic parameters for the profile search.
#[derive(Clone)]
pub struct ProfileParams {
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
    /// Convergence windows (each of length 1/nu) before giving up.
    pub max_windows: usize,
    pub grid: Arc<KGrid>,
    /// Calibrated d2 noise floor for (n, grid); see fourier::calibrate_d2_floor.
    pub noise_floor: f64,
}

/// Parameters for a stability trajectory.
#[derive(Clone)]
pub struct StabilityParams {
    pub dt: f64,
    pub horizon: f64,
    /// Number of observation rows along the trajectory.
    pub observations: usize,
    pub grid: Arc<KGrid>,
    pub noise_floor: f64,
    /// Moment order of the initial data (rate guide uses lambda(p)).
    pub p_order: f64,
}

/// Terminal state of the rescaled dynamics together with its diagnostics.
#[derive(Clone, Debug)]
pub struct ProfileResult {
    pub snapshot: Ensemble,
    pub cf: CharGrid,
    pub beta_bar: f64,
    pub n_bar: SymMat3,
    /// Spectral gap of the second-moment operator; sets the window length.
    pub nu: f64,
    /// Second-moment scale: sqrt of the projection of the terminal moments
    /// onto the n_bar ray (equals sqrt(k_scale) up to sampling error).
    pub alpha: f64,
    pub k_scale: f64,
    /// (t, ||M_t - k_scale * n_bar||_F) series.
    pub moment_gap: Vec<(f64, f64)>,
    /// (t, d2 between successive window snapshots) series.
    pub d2_lag: Vec<(f64, f64)>,
    pub noise_floor: f64,
    pub windows: usize,
}

/// d2 decay measurement against a profile.
#[derive(Clone, Debug)]
pub struct StabilityResult {
    /// (t, d2 of the rescaled ensemble against the alpha-dilated profile).
    pub d2_series: Vec<(f64, f64)>,
    /// (t, rescaled central second moments e^{-2 beta t} M_t).
    pub m_tilde_series: Vec<(f64, SymMat3)>,
    /// (t, raw empirical mean velocity), before any recentring.
    pub mean_series: Vec<(f64, Vector3<f64>)>,
    /// Log-linear decay rate over the points clear of the noise floor;
    /// absent when the series never rises above it.
    pub fitted_rate: Option<f64>,
    /// True when the trajectory starts and stays at the noise floor, so no
    /// rate is resolvable but stationarity itself is the expected outcome.
    pub indeterminate: bool,
    pub noise_floor: f64,
    /// Second-moment scale extracted from the late-time moment trajectory.
    pub alpha: f64,
    /// Mean Frobenius residual of the late-time projection onto n_bar.
    pub alpha_residual: f64,
    pub nu: f64,
    /// min(lambda(p)/4, nu/4): the qualitative rate guide, reported for
    /// context and never asserted against.
    pub theta_guide: f64,
}

fn central_second_moment(e: &Ensemble) -> SymMat3 {
    let mean = e.empirical_mean();
    let raw = e.second_moment().to_matrix();
    SymMat3::from_matrix(&(raw - mean * mean.transpose()))
}

/// Eigen data of the rescaled dynamics, with every failure mode folded into
/// the admissibility verdict: outside the admissible drift radius the leading
/// pair stops being simple, real, or positive.
pub(crate) fn admissible_eigen(
    alpha: f64,
    a: &Matrix3<f64>,
) -> Result<(f64, SymMat3, f64)> {
    let op = assemble_operator(alpha, a)?;
    let eig = op.leading_eigenpair().map_err(|e| match e {
        Error::ComplexLeading { .. } | Error::NonSimpleLeading { .. } | Error::EigenResidual { .. } => {
            Error::NonAdmissible(format!("leading moment eigenpair degenerates: {e}"))
        }
        other => other,
    })?;
    if eig.n_bar.min_eigenvalue() <= 0.0 {
        return Err(Error::NonAdmissible(
            "leading moment direction is not positive definite".into(),
        ));
    }
    if eig.gap <= 0.0 {
        return Err(Error::NonAdmissible(format!(
            "second-moment operator has no spectral gap (gap = {})",
            eig.gap
        )));
    }
    Ok((eig.beta_bar, eig.n_bar, eig.gap))
}

/// Integrate the drift-compensated dynamics from moments k_scale * n_bar
/// until successive window snapshots agree in d2, and return the terminal
/// ensemble as the profile approximation.
pub fn find_profile(
    a: &Matrix3<f64>,
    kernel: &CutoffKernel,
    k_scale: f64,
    sim: &ProfileParams,
) -> Result<ProfileResult> {
    if !(k_scale >= 0.0 && k_scale.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "second-moment scale must be nonnegative, got {k_scale}"
        )));
    }
    if sim.max_windows == 0 {
        return Err(Error::InvalidParam("need at least one convergence window".into()));
    }
    let (beta_bar, n_bar, nu) = admissible_eigen(kernel.bbar(), a)?;
    let law = if k_scale > 0.0 {
        InitialData::Gaussian { mean: Vector3::zeros(), cov: n_bar.scale(k_scale) }
    } else {
        InitialData::Dirac { point: Vector3::zeros() }
    };
    let mut e = init_ensemble(&law, sim.n, sim.seed)?;
    let scatter = ScatterTable::new(kernel)?;
    let drift = *a + Matrix3::identity() * beta_bar;
    let steps_per_window = ((1.0 / nu) / sim.dt).ceil().max(1.0) as usize;
    let target = n_bar.scale(k_scale);
    let gap_of = |e: &Ensemble| {
        let diff = central_second_moment(e).to_matrix() - target.to_matrix();
        SymMat3::from_matrix(&diff).frobenius()
    };
    let mut moment_gap = vec![(e.time(), gap_of(&e))];
    let mut d2_lag = Vec::new();
    let mut prev_cf = ecf(&e, &sim.grid);
    let mut consecutive = 0usize;
    let mut windows = 0usize;
    let mut converged = false;
    while windows < sim.max_windows {
        run(
            &mut e,
            &RunSpec {
                kernel,
                scatter: &scatter,
                drift: DriftModel::Constant(drift),
                rate_scale: RateScale::One,
                dt: sim.dt,
                n_steps: steps_per_window,
                observe_every: steps_per_window,
                p_orders: vec![],
                snapshot_every: None,
            },
        )?;
        windows += 1;
        let cf = ecf(&e, &sim.grid);
        let lag = d2(&cf, &prev_cf)?.value;
        d2_lag.push((e.time(), lag));
        moment_gap.push((e.time(), gap_of(&e)));
        prev_cf = cf;
        if lag <= 2.0 * sim.noise_floor {
            consecutive += 1;
            if consecutive >= 2 {
                converged = true;
                break;
            }
        } else {
            consecutive = 0;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            plateau: d2_lag.last().map(|&(_, d)| d).unwrap_or(f64::NAN),
        });
    }
    let alpha_sq = central_second_moment(&e).dot(&n_bar).max(0.0);
    let cf = ecf(&e, &sim.grid);
    Ok(ProfileResult {
        snapshot: e,
        cf,
        beta_bar,
        n_bar,
        nu,
        alpha: alpha_sq.sqrt(),
        k_scale,
        moment_gap,
        d2_lag,
        noise_floor: sim.noise_floor,
        windows,
    })
}

/// Rescale an ensemble's velocities into self-similar variables:
/// de-mean, then contract by e^{-beta t}.
pub fn rescaled_velocities(e: &Ensemble, beta_bar: f64) -> Vec<Vector3<f64>> {
    let mean = e.empirical_mean();
    let scale = (-beta_bar * e.time()).exp();
    e.velocities().iter().map(|v| (v - mean) * scale).collect()
}

/// Scale estimates restarted from progressively later times: for each start,
/// the mean projection of the rescaled moments onto the profile ray over the
/// observations at or after it. NaN when a start excludes every observation.
pub fn alpha_tail_estimates(
    series: &[(f64, SymMat3)],
    n_bar: &SymMat3,
    starts: &[f64],
) -> Vec<(f64, f64)> {
    starts
        .iter()
        .map(|&t0| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (t, m) in series {
                if *t >= t0 {
                    sum += m.dot(n_bar);
                    count += 1;
                }
            }
            let est = if count == 0 { f64::NAN } else { sum / count as f64 };
            (t0, est)
        })
        .collect()
}

fn fit_rate(d2_series: &[(f64, f64)], floor: f64) -> Result<(Option<f64>, bool)> {
    let usable: Vec<(f64, f64)> = d2_series
        .iter()
        .filter(|&&(_, d)| d > 3.0 * floor)
        .map(|&(t, d)| (t, d.ln()))
        .collect();
    if usable.is_empty() {
        return Ok((None, true));
    }
    if usable.len() < 4 {
        return Err(Error::RateUnresolvable { usable: usable.len() });
    }
    let xs: Vec<f64> = usable.iter().map(|u| u.0).collect();
    let ys: Vec<f64> = usable.iter().map(|u| u.1).collect();
    let (slope, _, _) = linreg(&xs, &ys);
    Ok((Some(-slope), false))
}

fn moments_of(vs: &[Vector3<f64>]) -> (Vector3<f64>, SymMat3) {
    let n = vs.len() as f64;
    let mut mean = Vector3::zeros();
    for v in vs {
        mean += v;
    }
    mean /= n;
    let mut raw = Matrix3::zeros();
    for v in vs {
        raw += v * v.transpose();
    }
    raw /= n;
    (mean, SymMat3::from_matrix(&(raw - mean * mean.transpose())))
}

/// Shared trajectory driver: runs the physical dynamics under the given
/// drift/rate models, rescales each velocity snapshot into self-similar
/// variables, extracts alpha from the late-time moment trajectory, and fits
/// the d2 decay toward the fixed alpha-dilated profile.
pub(crate) fn stability_trajectory(
    mut e: Ensemble,
    drift: DriftModel,
    rate_scale: RateScale,
    kernel: &CutoffKernel,
    profile: &ProfileResult,
    params: &StabilityParams,
) -> Result<StabilityResult> {
    if !(params.p_order > 2.0 && params.p_order <= 4.0) {
        return Err(Error::InvalidParam(format!(
            "moment order must lie in (2, 4], got {}",
            params.p_order
        )));
    }
    if params.observations < 2 {
        return Err(Error::InvalidParam("need at least 2 observations".into()));
    }
    let scatter = ScatterTable::new(kernel)?;
    let total_steps = ((params.horizon / params.dt).ceil().max(1.0)) as usize;
    let chunk = (total_steps / params.observations).max(1);
    let beta = profile.beta_bar;
    let n_bar = profile.n_bar;
    let record = run(
        &mut e,
        &RunSpec {
            kernel,
            scatter: &scatter,
            drift,
            rate_scale,
            dt: params.dt,
            n_steps: total_steps,
            observe_every: total_steps,
            p_orders: vec![],
            snapshot_every: Some(chunk),
        },
    )?;

    // self-similar variables: de-mean, contract by e^{-beta t}
    let mut rescaled: Vec<(f64, Vec<Vector3<f64>>)> = Vec::with_capacity(record.snapshots.len());
    let mut m_tilde_series = Vec::with_capacity(record.snapshots.len());
    let mut mean_series = Vec::with_capacity(record.snapshots.len());
    for (t, vs) in &record.snapshots {
        let (mean, m_central) = moments_of(vs);
        let scale = (-beta * t).exp();
        mean_series.push((*t, mean));
        m_tilde_series.push((*t, m_central.scale(scale * scale)));
        rescaled.push((*t, vs.iter().map(|v| (v - mean) * scale).collect()));
    }

    // alpha from the late half of the rescaled moment trajectory
    let half = m_tilde_series.len() / 2;
    let late = &m_tilde_series[half..];
    let alpha_sq = late.iter().map(|(_, m)| m.dot(&n_bar)).sum::<f64>() / late.len() as f64;
    let alpha = alpha_sq.max(0.0).sqrt();
    let alpha_residual = late
        .iter()
        .map(|(_, m)| {
            let diff = m.to_matrix() - n_bar.scale(alpha_sq).to_matrix();
            SymMat3::from_matrix(&diff).frobenius()
        })
        .sum::<f64>()
        / late.len() as f64;

    // fixed reference: the profile dilated to the trajectory's limit scale
    let ratio = (alpha / profile.alpha.max(f64::MIN_POSITIVE)).max(f64::MIN_POSITIVE);
    let reference = ecf_scaled(&profile.snapshot, &params.grid, ratio)?;
    let mut d2_series = Vec::with_capacity(rescaled.len());
    for (t, vs) in rescaled {
        let cf = ecf(&Ensemble::from_velocities(vs, t, e.seed())?, &params.grid);
        d2_series.push((t, d2(&cf, &reference)?.value));
    }

    let (fitted_rate, indeterminate) = fit_rate(&d2_series, params.noise_floor)?;
    let theta_guide = (kernel.lambda_p(params.p_order)? / 4.0).min(profile.nu / 4.0);
    Ok(StabilityResult {
        d2_series,
        m_tilde_series,
        mean_series,
        fitted_rate,
        indeterminate,
        noise_floor: params.noise_floor,
        alpha,
        alpha_residual,
        nu: profile.nu,
        theta_guide,
    })
}

/// Measure the d2 decay of the rescaled trajectory started from `f0` toward
/// the alpha-dilated profile, under the physical dynamics with drift `a`.
pub fn stability_run(
    f0: Ensemble,
    a: &Matrix3<f64>,
    kernel: &CutoffKernel,
    profile: &ProfileResult,
    params: &StabilityParams,
) -> Result<StabilityResult> {
    stability_trajectory(
        f0,
        DriftModel::Constant(*a),
        RateScale::One,
        kernel,
        profile,
        params,
    )
}
