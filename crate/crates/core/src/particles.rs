//! Stochastic particle solver: exact drift along characteristics combined
//! with conservative pairwise Maxwell collisions at the truncated kernel's
//! rate. Strang splitting (half drift, collide, half drift) keeps the step
//! second order in dt.

use crate::error::{Error, Result};
use crate::kernel::{CutoffKernel, ScatterTable};
use crate::moments::SymMat3;
use crate::rng::substream;
use nalgebra::{Matrix3, Vector3};
use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Poisson, StandardNormal};

/// Initial velocity laws available to the sampler. Continuous laws are
/// re-centered after sampling so the empirical mean hits the target exactly;
/// distance diagnostics between ensembles assume equal means.
#[derive(Clone, Debug)]
pub enum InitialData {
    Dirac { point: Vector3<f64> },
    Gaussian { mean: Vector3<f64>, cov: SymMat3 },
    UniformBall { center: Vector3<f64>, radius: f64 },
    /// Equal-weight mixture of two point masses; N must be even so the
    /// split is exact.
    TwoPoint { a: Vector3<f64>, b: Vector3<f64> },
}

/// Empirical measure with uniform weights 1/N and its own collision RNG
/// state, so runs are reproducible from (law, N, seed) alone.
#[derive(Clone, Debug)]
pub struct Ensemble {
    velocities: Vec<Vector3<f64>>,
    time: f64,
    seed: u64,
    rng: ChaCha12Rng,
}

impl Ensemble {
    /// Wrap explicit velocities (e.g. a reloaded snapshot) with a fresh
    /// collision stream derived from `seed`.
    pub fn from_velocities(velocities: Vec<Vector3<f64>>, time: f64, seed: u64) -> Result<Self> {
        if velocities.len() < 2 {
            return Err(Error::InvalidParam(format!(
                "ensemble needs at least 2 particles, got {}",
                velocities.len()
            )));
        }
        Ok(Ensemble {
            velocities,
            time,
            seed,
            rng: substream(seed, "ensemble:collisions"),
        })
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.velocities.len() as f64
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn velocities(&self) -> &[Vector3<f64>] {
        &self.velocities
    }

    pub fn empirical_mean(&self) -> Vector3<f64> {
        let mut s = Vector3::zeros();
        for v in &self.velocities {
            s += v;
        }
        s / self.velocities.len() as f64
    }

    /// Raw second moment (1/N) sum of v v^T.
    pub fn second_moment(&self) -> SymMat3 {
        let n = self.velocities.len() as f64;
        let mut m = [0.0f64; 6];
        for v in &self.velocities {
            m[0] += v.x * v.x;
            m[1] += v.y * v.y;
            m[2] += v.z * v.z;
            m[3] += v.x * v.y;
            m[4] += v.x * v.z;
            m[5] += v.y * v.z;
        }
        SymMat3 {
            m11: m[0] / n,
            m22: m[1] / n,
            m33: m[2] / n,
            m12: m[3] / n,
            m13: m[4] / n,
            m23: m[5] / n,
        }
    }

    /// (1/N) sum of |v|^p for p > 0.
    pub fn pth_moment(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidParam(format!("moment order must be positive, got {p}")));
        }
        let n = self.velocities.len() as f64;
        let mut s = 0.0;
        for v in &self.velocities {
            s += v.norm().powf(p);
        }
        Ok(s / n)
    }

    pub fn snapshot(&self) -> Vec<Vector3<f64>> {
        self.velocities.clone()
    }
}

pub fn init_ensemble(law: &InitialData, n: usize, seed: u64) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::InvalidParam(format!("ensemble needs at least 2 particles, got {n}")));
    }
    let mut rng = substream(seed, "ensemble:init");
    let velocities = match law {
        InitialData::Dirac { point } => vec![*point; n],
        InitialData::Gaussian { mean, cov } => {
            let factor = cov_factor(cov)?;
            let mut vs: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    let z = Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    );
                    factor * z
                })
                .collect();
            recenter(&mut vs, mean);
            vs
        }
        InitialData::UniformBall { center, radius } => {
            if !(*radius > 0.0 && radius.is_finite()) {
                return Err(Error::InvalidParam(format!("ball radius must be positive, got {radius}")));
            }
            let mut vs: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    let mut z = Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    );
                    let nz = z.norm();
                    if nz < 1e-300 {
                        z = Vector3::x();
                    } else {
                        z /= nz;
                    }
                    let r = radius * rng.random::<f64>().cbrt();
                    z * r
                })
                .collect();
            recenter(&mut vs, center);
            vs
        }
        InitialData::TwoPoint { a, b } => {
            if n % 2 != 0 {
                return Err(Error::InvalidParam("two-point law needs an even particle count".into()));
            }
            let mut vs = Vec::with_capacity(n);
            for i in 0..n {
                vs.push(if i % 2 == 0 { *a } else { *b });
            }
            vs
        }
    };
    let collision_rng = substream(seed, "ensemble:collisions");
    Ok(Ensemble { velocities, time: 0.0, seed, rng: collision_rng })
}

/// Square root factor of a PSD covariance via its symmetric eigensystem;
/// eigenvalues within the -1e-12 slack are clamped to zero so rank-deficient
/// covariances (flat Gaussians) are accepted.
fn cov_factor(cov: &SymMat3) -> Result<Matrix3<f64>> {
    let m = cov.to_matrix();
    let eig = m.symmetric_eigen();
    let scale = 1.0 + cov.frobenius();
    let mut d = Matrix3::zeros();
    for i in 0..3 {
        let ev = eig.eigenvalues[i];
        if ev < -1e-12 * scale {
            return Err(Error::InvalidParam(format!(
                "covariance must be positive semidefinite (eigenvalue {ev})"
            )));
        }
        d[(i, i)] = ev.max(0.0).sqrt();
    }
    Ok(eig.eigenvectors * d)
}

fn recenter(vs: &mut [Vector3<f64>], target: &Vector3<f64>) {
    let n = vs.len() as f64;
    let mut mean = Vector3::zeros();
    for v in vs.iter() {
        mean += v;
    }
    mean /= n;
    let shift = target - mean;
    for v in vs.iter_mut() {
        *v += shift;
    }
}

/// Drift matrix with the flow of one configured step cached. The flow is the
/// measure pushforward of the transport part: v maps to e^{-A dt} v.
#[derive(Clone, Debug)]
pub struct DriftSpec {
    a: Matrix3<f64>,
    dt: f64,
    flow: Matrix3<f64>,
}

impl DriftSpec {
    pub fn new(a: Matrix3<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParam(format!("drift step must be positive, got {dt}")));
        }
        let flow = (-a * dt).exp();
        Ok(DriftSpec { a, dt, flow })
    }

    pub fn a(&self) -> &Matrix3<f64> {
        &self.a
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn flow(&self) -> &Matrix3<f64> {
        &self.flow
    }

    /// Entrywise L1 norm, the drift-size measure used by the admissibility
    /// conditions.
    pub fn norm_l1(&self) -> f64 {
        self.a.iter().map(|x| x.abs()).sum()
    }
}

/// Apply one cached drift flow to every velocity and advance time.
pub fn drift_step(e: &mut Ensemble, d: &DriftSpec) {
    for v in &mut e.velocities {
        *v = d.flow * *v;
    }
    e.time += d.dt;
}

/// Post-collision pair in the sigma representation: both particles keep the
/// pair's center of mass, the relative velocity is rotated onto sigma.
pub fn post_collision(
    v: &Vector3<f64>,
    v_star: &Vector3<f64>,
    sigma: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let c = (v + v_star) * 0.5;
    let d = sigma * ((v - v_star).norm() * 0.5);
    (c + d, c - d)
}

/// Outcome of one collision sweep, including the conservation audit.
/// Deltas are accumulated pairwise (post minus pre), so they measure pure
/// floating-point drift without cancellation against the bulk sums.
#[derive(Clone, Copy, Debug, Default)]
pub struct CollisionStats {
    pub pairs: usize,
    pub skipped: usize,
    pub max_pair_momentum_rel: f64,
    pub max_pair_energy_rel: f64,
    pub momentum_delta: Vector3<f64>,
    pub energy_delta: f64,
}

impl CollisionStats {
    /// Merge another sweep's outcome into this accumulator.
    pub fn absorb(&mut self, other: &CollisionStats) {
        self.pairs += other.pairs;
        self.skipped += other.skipped;
        self.max_pair_momentum_rel = self.max_pair_momentum_rel.max(other.max_pair_momentum_rel);
        self.max_pair_energy_rel = self.max_pair_energy_rel.max(other.max_pair_energy_rel);
        self.momentum_delta += other.momentum_delta;
        self.energy_delta += other.energy_delta;
    }
}

/// One collision sweep at the kernel's full rate.
pub fn collision_step(
    e: &mut Ensemble,
    kernel: &CutoffKernel,
    scatter: &ScatterTable,
    dt: f64,
) -> Result<CollisionStats> {
    collision_step_scaled(e, kernel, scatter, dt, 1.0)
}

/// Collision sweep with the rate multiplied by `scale`. Pair count is
/// Poisson with mean N * S * scale * dt / 2, capped at floor(N/2); pairs are
/// disjoint and uniformly chosen, zero relative velocity is a no-op.
pub fn collision_step_scaled(
    e: &mut Ensemble,
    kernel: &CutoffKernel,
    scatter: &ScatterTable,
    dt: f64,
    scale: f64,
) -> Result<CollisionStats> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParam(format!("collision step must be positive, got {dt}")));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParam(format!("rate scale must be nonnegative, got {scale}")));
    }
    let rate = kernel.total_rate() * scale;
    let dt_rate = dt * rate;
    if dt_rate > 0.5 {
        return Err(Error::StepTooLarge { dt_rate });
    }
    let n = e.velocities.len();
    let mut stats = CollisionStats::default();
    if dt_rate == 0.0 {
        return Ok(stats);
    }
    let mean = 0.5 * n as f64 * rate * dt;
    let drawn = e.rng.sample(Poisson::new(mean).map_err(|err| {
        Error::InvalidParam(format!("collision count distribution rejected mean {mean}: {err}"))
    })?);
    let pairs = (drawn as usize).min(n / 2);
    if pairs == 0 {
        return Ok(stats);
    }

    // Partial Fisher-Yates: the first 2*pairs slots become a uniform draw of
    // disjoint indices.
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for i in 0..2 * pairs {
        let j = e.rng.random_range(i..n);
        idx.swap(i, j);
    }

    for p in 0..pairs {
        let i = idx[2 * p] as usize;
        let j = idx[2 * p + 1] as usize;
        let vi = e.velocities[i];
        let vj = e.velocities[j];
        let g = vi - vj;
        let gn = g.norm();
        if gn < 1e-300 {
            stats.skipped += 1;
            continue;
        }
        let sigma = scatter.sample_sigma(&mut e.rng, &g)?;
        let (wi, wj) = post_collision(&vi, &vj, &sigma);
        let mom_pre = vi + vj;
        let mom_post = wi + wj;
        let en_pre = vi.norm_squared() + vj.norm_squared();
        let en_post = wi.norm_squared() + wj.norm_squared();
        let mom_scale = vi.norm() + vj.norm() + f64::MIN_POSITIVE;
        stats.max_pair_momentum_rel =
            stats.max_pair_momentum_rel.max((mom_post - mom_pre).norm() / mom_scale);
        stats.max_pair_energy_rel =
            stats.max_pair_energy_rel.max((en_post - en_pre).abs() / (en_pre + f64::MIN_POSITIVE));
        stats.momentum_delta += mom_post - mom_pre;
        stats.energy_delta += en_post - en_pre;
        stats.pairs += 1;
        e.velocities[i] = wi;
        e.velocities[j] = wj;
    }
    Ok(stats)
}

/// Effective drift matrix over a run: fixed, or evaluated at the midpoint of
/// each half-drift interval (keeps the splitting second order for smoothly
/// varying drifts).
pub enum DriftModel {
    Constant(Matrix3<f64>),
    Varying(Box<dyn Fn(f64) -> Matrix3<f64>>),
}

impl DriftModel {
    fn matrix_at(&self, t: f64) -> Matrix3<f64> {
        match self {
            DriftModel::Constant(a) => *a,
            DriftModel::Varying(f) => f(t),
        }
    }
}

/// Time-dependent multiplier on the collision rate.
pub enum RateScale {
    One,
    Varying(Box<dyn Fn(f64) -> f64>),
}

impl RateScale {
    fn at(&self, t: f64) -> f64 {
        match self {
            RateScale::One => 1.0,
            RateScale::Varying(f) => f(t),
        }
    }
}

/// Run configuration for the splitting engine.
pub struct RunSpec<'a> {
    pub kernel: &'a CutoffKernel,
    pub scatter: &'a ScatterTable,
    pub drift: DriftModel,
    pub rate_scale: RateScale,
    pub dt: f64,
    pub n_steps: usize,
    /// Record a moment row every this many steps (and always at start/end).
    pub observe_every: usize,
    /// Absolute-moment orders recorded alongside the second moments.
    pub p_orders: Vec<f64>,
    /// Velocity snapshots every this many steps, if requested.
    pub snapshot_every: Option<usize>,
}

/// One observable record: time, second moments, requested |v|^p moments.
#[derive(Clone, Debug)]
pub struct MomentRow {
    pub t: f64,
    pub m: SymMat3,
    pub p_moments: Vec<f64>,
}

/// Accumulated conservation audit over a run. Relative errors are per pair;
/// drifts accumulate the pairwise deltas across every collision sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConservationAudit {
    pub max_pair_momentum_rel: f64,
    pub max_pair_energy_rel: f64,
    pub momentum_drift: Vector3<f64>,
    pub energy_drift: f64,
    pub pairs: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub rows: Vec<MomentRow>,
    pub snapshots: Vec<(f64, Vec<Vector3<f64>>)>,
    pub audit: ConservationAudit,
    pub steps: usize,
    pub final_time: f64,
}

fn observe(e: &Ensemble, p_orders: &[f64]) -> Result<MomentRow> {
    let mut p_moments = Vec::with_capacity(p_orders.len());
    for &p in p_orders {
        p_moments.push(e.pth_moment(p)?);
    }
    Ok(MomentRow { t: e.time, m: e.second_moment(), p_moments })
}

/// Strang-split run: half drift, collision sweep, half drift, repeated for
/// n_steps. Time is reconstructed as t0 + k*dt so power-of-two step
/// refinements land on bitwise identical grids.
pub fn run(e: &mut Ensemble, spec: &RunSpec) -> Result<RunRecord> {
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(Error::InvalidParam(format!("run step must be positive, got {}", spec.dt)));
    }
    if spec.observe_every == 0 {
        return Err(Error::InvalidParam("observe_every must be at least 1".into()));
    }
    if let Some(s) = spec.snapshot_every {
        if s == 0 {
            return Err(Error::InvalidParam("snapshot_every must be at least 1".into()));
        }
    }
    let t0 = e.time;
    let dt = spec.dt;
    let cached_half = match &spec.drift {
        DriftModel::Constant(a) => Some((-a * (0.5 * dt)).exp()),
        DriftModel::Varying(_) => None,
    };
    let mut rows = vec![observe(e, &spec.p_orders)?];
    let mut snapshots = Vec::new();
    if spec.snapshot_every.is_some() {
        snapshots.push((e.time, e.snapshot()));
    }
    let mut audit = ConservationAudit::default();

    for k in 0..spec.n_steps {
        let t_k = t0 + k as f64 * dt;
        let half1 = cached_half.unwrap_or_else(|| {
            (-spec.drift.matrix_at(t_k + 0.25 * dt) * (0.5 * dt)).exp()
        });
        for v in &mut e.velocities {
            *v = half1 * *v;
        }
        let scale = spec.rate_scale.at(t_k + 0.5 * dt);
        let stats = collision_step_scaled(e, spec.kernel, spec.scatter, dt, scale)?;
        audit.max_pair_momentum_rel = audit.max_pair_momentum_rel.max(stats.max_pair_momentum_rel);
        audit.max_pair_energy_rel = audit.max_pair_energy_rel.max(stats.max_pair_energy_rel);
        audit.momentum_drift += stats.momentum_delta;
        audit.energy_drift += stats.energy_delta;
        audit.pairs += stats.pairs;
        audit.skipped += stats.skipped;
        let half2 = cached_half.unwrap_or_else(|| {
            (-spec.drift.matrix_at(t_k + 0.75 * dt) * (0.5 * dt)).exp()
        });
        for v in &mut e.velocities {
            *v = half2 * *v;
        }
        e.time = t0 + (k + 1) as f64 * dt;

        let at_end = k + 1 == spec.n_steps;
        if (k + 1) % spec.observe_every == 0 || at_end {
            rows.push(observe(e, &spec.p_orders)?);
        }
        if let Some(s) = spec.snapshot_every {
            if (k + 1) % s == 0 || at_end {
                snapshots.push((e.time, e.snapshot()));
            }
        }
    }
    // collapse duplicate tail entries when the end coincides with the cadence
    rows.dedup_by(|a, b| a.t == b.t);
    snapshots.dedup_by(|a, b| a.0 == b.0);
    Ok(RunRecord { rows, snapshots, audit, steps: spec.n_steps, final_time: e.time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::ode;
    use crate::stats::linreg;
    use nalgebra::Vector6;

    fn unit_cutoff(theta_min: f64) -> CutoffKernel {
        CutoffKernel::new(Kernel::constant(1.0).unwrap(), theta_min).unwrap()
    }

    fn shear(s: f64) -> Matrix3<f64> {
        let mut a = Matrix3::zeros();
        a[(0, 1)] = s;
        a
    }

    #[test]
    fn dirac_ensemble_is_exact() {
        let e = init_ensemble(&InitialData::Dirac { point: Vector3::zeros() }, 10_000, 1).unwrap();
        assert!(e.velocities().iter().all(|v| v == &Vector3::zeros()));
        assert_eq!(e.second_moment().frobenius(), 0.0);
        assert_eq!(e.pth_moment(2.0).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_ensemble_moments() {
        let n = 100_000;
        let e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            n,
            2,
        )
        .unwrap();
        assert!(e.empirical_mean().norm() < 1e-13, "means are pinned exactly");
        let m = e.second_moment().to_matrix();
        let tol = 5.0 * (2.0 / n as f64).sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m[(i, j)] - want).abs() < tol, "entry ({i},{j}) = {}", m[(i, j)]);
            }
        }
        // fourth absolute moment of a standard 3D Gaussian is 15
        let p4 = e.pth_moment(4.0).unwrap();
        let se = (720.0 / n as f64).sqrt();
        assert!((p4 - 15.0).abs() < 5.0 * se, "p4 = {p4}");
    }

    #[test]
    fn gaussian_accepts_singular_covariance() {
        let cov = SymMat3 { m11: 1.0, m22: 0.0, m33: 0.0, m12: 0.0, m13: 0.0, m23: 0.0 };
        let e = init_ensemble(&InitialData::Gaussian { mean: Vector3::zeros(), cov }, 1000, 3).unwrap();
        assert!(e.velocities().iter().all(|v| v.y == 0.0 && v.z == 0.0));
        let bad = SymMat3 { m11: 1.0, m22: -0.5, m33: 1.0, m12: 0.0, m13: 0.0, m23: 0.0 };
        assert!(init_ensemble(&InitialData::Gaussian { mean: Vector3::zeros(), cov: bad }, 100, 3).is_err());
    }

    #[test]
    fn two_point_ensemble_is_exact() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        let e = init_ensemble(&InitialData::TwoPoint { a, b: -a }, 10_000, 4).unwrap();
        assert_eq!(e.empirical_mean(), Vector3::zeros());
        let m = e.second_moment();
        assert_eq!(m.m11, 1.0);
        assert_eq!(m.m22, 0.0);
        assert_eq!(e.pth_moment(4.0).unwrap(), 1.0);
        assert!(init_ensemble(&InitialData::TwoPoint { a, b: -a }, 101, 4).is_err());
    }

    #[test]
    fn uniform_ball_stays_inside_and_matches_radial_moment() {
        let n = 50_000;
        let r = 2.0;
        let e = init_ensemble(
            &InitialData::UniformBall { center: Vector3::zeros(), radius: r },
            n,
            5,
        )
        .unwrap();
        assert!(e.empirical_mean().norm() < 1e-13);
        // recentering can push a point marginally past the boundary
        assert!(e.velocities().iter().all(|v| v.norm() <= r * 1.01));
        // E|v|^2 = 3 r^2 / 5
        let want = 3.0 * r * r / 5.0;
        let got = e.pth_moment(2.0).unwrap();
        let se = want / (n as f64).sqrt();
        assert!((got - want).abs() < 5.0 * se, "radial moment {got} vs {want}");
        assert!(init_ensemble(&InitialData::UniformBall { center: Vector3::zeros(), radius: 0.0 }, 10, 5).is_err());
    }

    #[test]
    fn ensemble_size_guard() {
        assert!(init_ensemble(&InitialData::Dirac { point: Vector3::zeros() }, 1, 0).is_err());
    }

    #[test]
    fn drift_spec_flow_inverts() {
        let a = shear(0.3) + Matrix3::identity() * 0.1;
        let d = DriftSpec::new(a, 0.25).unwrap();
        let inv = (a * 0.25).exp();
        assert!((d.flow() * inv - Matrix3::identity()).norm() < 1e-12);
        assert!((d.norm_l1() - (0.3 + 0.3)).abs() < 1e-15);
        assert!(DriftSpec::new(a, 0.0).is_err());
    }

    #[test]
    fn shear_drift_is_exact_nilpotent_map() {
        let s = 0.4;
        let dt = 0.5;
        let d = DriftSpec::new(shear(s), dt).unwrap();
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            100,
            6,
        )
        .unwrap();
        let before = e.snapshot();
        drift_step(&mut e, &d);
        for (v0, v1) in before.iter().zip(e.velocities()) {
            let want = Vector3::new(v0.x - s * dt * v0.y, v0.y, v0.z);
            assert!((v1 - want).norm() <= 1e-13 * (1.0 + v0.norm()));
        }
        assert!((e.time() - dt).abs() < 1e-15);
    }

    #[test]
    fn isotropic_drift_contracts_uniformly() {
        let d = DriftSpec::new(Matrix3::identity(), 1.0).unwrap();
        let mut e = init_ensemble(
            &InitialData::TwoPoint { a: Vector3::new(1.0, 2.0, -1.0), b: Vector3::new(-1.0, -2.0, 1.0) },
            100,
            7,
        )
        .unwrap();
        let before = e.snapshot();
        drift_step(&mut e, &d);
        let c = (-1.0f64).exp();
        for (v0, v1) in before.iter().zip(e.velocities()) {
            assert!((v1 - v0 * c).norm() < 1e-14 * (1.0 + v0.norm()));
        }
    }

    #[test]
    fn drift_transforms_moments_like_the_collisionless_ode() {
        let a = shear(0.7) + Matrix3::identity() * 0.2;
        let dt = 0.3;
        let d = DriftSpec::new(a, dt).unwrap();
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            20_000,
            8,
        )
        .unwrap();
        let m0 = e.second_moment();
        drift_step(&mut e, &d);
        let m1 = e.second_moment().to_matrix();
        // exact pushforward of the empirical law
        let exact = d.flow() * m0.to_matrix() * d.flow().transpose();
        assert!((m1 - exact).norm() < 1e-12 * (1.0 + exact.norm()));
        // and the pure-drift moment ODE agrees
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let m = SymMat3::from_vec6(&Vector6::from_column_slice(y)).to_matrix();
            let dm = -a * m - (a * m).transpose();
            dy.copy_from_slice(SymMat3::from_matrix(&dm).to_vec6().as_slice());
        };
        let rows = ode::integrate(rhs, 0.0, m0.to_vec6().as_slice(), &[dt], 1e-12, 1e-14).unwrap();
        let ode_m = SymMat3::from_vec6(&Vector6::from_column_slice(&rows[0])).to_matrix();
        assert!((m1 - ode_m).norm() < 1e-10 * (1.0 + ode_m.norm()));
    }

    #[test]
    fn sigma_representation_examples() {
        let v = Vector3::new(1.0, 0.0, 0.0);
        let vs = -v;
        let (w, ws) = post_collision(&v, &vs, &Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(w, Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(ws, Vector3::new(0.0, -1.0, 0.0));
        // sigma along the relative direction leaves the pair unchanged
        let p = Vector3::new(0.4, -0.2, 1.0);
        let q = Vector3::new(-0.1, 0.5, 0.2);
        let n = (p - q).normalize();
        let (w2, ws2) = post_collision(&p, &q, &n);
        assert!((w2 - p).norm() < 1e-14);
        assert!((ws2 - q).norm() < 1e-14);
    }

    #[test]
    fn collision_step_guards_rate() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            100,
            9,
        )
        .unwrap();
        let dt_bad = 0.6 / k.total_rate();
        assert!(matches!(
            collision_step(&mut e, &k, &t, dt_bad),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn collision_step_conserves_pairwise() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            20_000,
            10,
        )
        .unwrap();
        let p_before = {
            let mut s = Vector3::zeros();
            for v in e.velocities() {
                s += v;
            }
            s
        };
        let en_before: f64 = e.velocities().iter().map(|v| v.norm_squared()).sum();
        let dt = 0.1 / k.total_rate();
        let mut stats = CollisionStats::default();
        for _ in 0..20 {
            stats.absorb(&collision_step(&mut e, &k, &t, dt).unwrap());
        }
        assert!(stats.pairs > 1000, "collisions must actually happen");
        assert!(stats.max_pair_momentum_rel < 1e-12);
        assert!(stats.max_pair_energy_rel < 1e-12);
        let p_after = {
            let mut s = Vector3::zeros();
            for v in e.velocities() {
                s += v;
            }
            s
        };
        let en_after: f64 = e.velocities().iter().map(|v| v.norm_squared()).sum();
        assert!((p_after - p_before).norm() < 1e-10 * en_before.sqrt());
        assert!((en_after - en_before).abs() < 1e-10 * en_before);
    }

    #[test]
    fn dirac_is_a_fixed_point_of_the_full_dynamics() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let mut e = init_ensemble(&InitialData::Dirac { point: Vector3::zeros() }, 1000, 11).unwrap();
        let spec = RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Constant(shear(0.5)),
            rate_scale: RateScale::One,
            dt: 0.1 / k.total_rate(),
            n_steps: 50,
            observe_every: 10,
            p_orders: vec![2.0],
            snapshot_every: None,
        };
        let rec = run(&mut e, &spec).unwrap();
        assert!(e.velocities().iter().all(|v| v == &Vector3::zeros()));
        assert_eq!(rec.audit.pairs + rec.audit.skipped, rec.audit.skipped, "every pair is a zero-g skip");
        assert!(rec.rows.iter().all(|r| r.m.frobenius() == 0.0));
    }

    #[test]
    fn equilibrium_moments_stay_put() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let n = 20_000;
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            n,
            12,
        )
        .unwrap();
        let m0 = e.second_moment().to_matrix();
        let spec = RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Constant(Matrix3::zeros()),
            rate_scale: RateScale::One,
            dt: 0.1 / k.total_rate(),
            n_steps: 100,
            observe_every: 20,
            p_orders: vec![],
            snapshot_every: None,
        };
        let rec = run(&mut e, &spec).unwrap();
        let tol = 6.0 * (2.0 / n as f64).sqrt();
        for row in &rec.rows {
            assert!((row.m.to_matrix() - m0).norm() < tol * 3.0, "equilibrium drifted at t = {}", row.t);
        }
    }

    #[test]
    fn deviatoric_relaxation_rate_tracks_the_kernel() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let n = 30_000;
        let cov = SymMat3 { m11: 2.0, m22: 1.0, m33: 1.0, m12: 0.0, m13: 0.0, m23: 0.0 };
        let mut e = init_ensemble(&InitialData::Gaussian { mean: Vector3::zeros(), cov }, n, 13).unwrap();
        let dt = 0.1 / k.total_rate();
        let t_end = 0.8 / k.bbar();
        let n_steps = (t_end / dt).ceil() as usize;
        let spec = RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Constant(Matrix3::zeros()),
            rate_scale: RateScale::One,
            dt,
            n_steps,
            observe_every: (n_steps / 30).max(1),
            p_orders: vec![],
            snapshot_every: None,
        };
        let rec = run(&mut e, &spec).unwrap();
        let xs: Vec<f64> = rec.rows.iter().map(|r| r.t).collect();
        let ys: Vec<f64> = rec
            .rows
            .iter()
            .map(|r| (r.m.m11 - 0.5 * (r.m.m22 + r.m.m33)).abs().max(1e-12).ln())
            .collect();
        let (slope, _, r2) = linreg(&xs, &ys);
        let want = -2.0 * k.bbar();
        assert!(r2 > 0.9, "relaxation must be log-linear, r2 = {r2}");
        assert!(
            (slope - want).abs() < 0.2 * want.abs(),
            "deviatoric rate {slope} vs {want}"
        );
    }

    #[test]
    fn strang_run_tracks_the_moment_ode() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let n = 30_000;
        let a = shear(0.1 * k.bbar());
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            n,
            14,
        )
        .unwrap();
        let m0 = e.second_moment();
        let dt = 0.05 / k.total_rate();
        let t_end = 1.0;
        let n_steps = (t_end / dt).ceil() as usize;
        let spec = RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Constant(a),
            rate_scale: RateScale::One,
            dt,
            n_steps,
            observe_every: n_steps,
            p_orders: vec![],
            snapshot_every: None,
        };
        let rec = run(&mut e, &spec).unwrap();
        let t_fin = rec.final_time;
        let oracle = crate::moments::integrate_moments(&a, k.bbar(), &m0, &[t_fin]).unwrap();
        let diff = (rec.rows.last().unwrap().m.to_matrix() - oracle[0].to_matrix()).norm();
        let stat = 5.0 * (2.0 / n as f64).sqrt() * 3.0;
        assert!(diff < stat, "moment-ODE fidelity: diff {diff} vs band {stat}");
    }

    #[test]
    fn runs_are_reproducible_and_seed_sensitive() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let law = InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() };
        let make_spec = || RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Constant(shear(0.2)),
            rate_scale: RateScale::One,
            dt: 0.1 / k.total_rate(),
            n_steps: 40,
            observe_every: 10,
            p_orders: vec![3.0],
            snapshot_every: None,
        };
        let mut e1 = init_ensemble(&law, 5000, 42).unwrap();
        let mut e2 = init_ensemble(&law, 5000, 42).unwrap();
        let mut e3 = init_ensemble(&law, 5000, 43).unwrap();
        run(&mut e1, &make_spec()).unwrap();
        run(&mut e2, &make_spec()).unwrap();
        run(&mut e3, &make_spec()).unwrap();
        let bytes = |e: &Ensemble| -> Vec<u8> {
            e.velocities().iter().flat_map(|v| {
                [v.x.to_le_bytes(), v.y.to_le_bytes(), v.z.to_le_bytes()].concat()
            }).collect()
        };
        assert_eq!(bytes(&e1), bytes(&e2), "same seed must reproduce bytes");
        assert_ne!(bytes(&e1), bytes(&e3), "different seeds must diverge");
    }

    #[test]
    fn constant_and_varying_drift_agree_bitwise_on_the_same_matrix() {
        let k = unit_cutoff(1e-2);
        let t = ScatterTable::new(&k).unwrap();
        let a = shear(0.15);
        let law = InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() };
        let dt = 0.1 / k.total_rate();
        let mut e1 = init_ensemble(&law, 4000, 77).unwrap();
        let mut e2 = init_ensemble(&law, 4000, 77).unwrap();
        let spec1 = RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Constant(a),
            rate_scale: RateScale::One,
            dt,
            n_steps: 30,
            observe_every: 5,
            p_orders: vec![2.0, 3.0],
            snapshot_every: None,
        };
        let spec2 = RunSpec {
            kernel: &k,
            scatter: &t,
            drift: DriftModel::Varying(Box::new(move |_| a)),
            rate_scale: RateScale::One,
            dt,
            n_steps: 30,
            observe_every: 5,
            p_orders: vec![2.0, 3.0],
            snapshot_every: None,
        };
        let r1 = run(&mut e1, &spec1).unwrap();
        let r2 = run(&mut e2, &spec2).unwrap();
        for (v1, v2) in e1.velocities().iter().zip(e2.velocities()) {
            assert_eq!(v1.x.to_bits(), v2.x.to_bits());
            assert_eq!(v1.y.to_bits(), v2.y.to_bits());
            assert_eq!(v1.z.to_bits(), v2.z.to_bits());
        }
        for (a_row, b_row) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a_row.m.m11.to_bits(), b_row.m.m11.to_bits());
            assert_eq!(a_row.p_moments[1].to_bits(), b_row.p_moments[1].to_bits());
        }
    }

    #[test]
    fn chained_drift_matches_fused_flow() {
        // applying the cached flow twice equals one application of its
        // square, up to one rounding per entry
        let a = shear(0.3) + Matrix3::identity() * 0.05;
        let d = DriftSpec::new(a, 0.2).unwrap();
        let fused = d.flow() * d.flow();
        let mut e = init_ensemble(
            &InitialData::Gaussian { mean: Vector3::zeros(), cov: SymMat3::identity() },
            500,
            15,
        )
        .unwrap();
        let before = e.snapshot();
        drift_step(&mut e, &d);
        drift_step(&mut e, &d);
        for (v0, v1) in before.iter().zip(e.velocities()) {
            let want = fused * v0;
            assert!((v1 - want).norm() <= 1e-13 * (1.0 + v0.norm()), "composition drift too large");
        }
    }
}
