//! Characteristic-function layer: empirical CFs on direction/radius grids,
//! the quadratic-weighted sup distance d2, a collision evaluator acting on
//! CFs through the angular average over the scattering sphere, and the
//! contraction / comparison diagnostics built on top of them.

use crate::error::{Error, Result};
use crate::kernel::CutoffKernel;
use crate::particles::{init_ensemble, Ensemble, InitialData};
use crate::quad::gauss_legendre;
use crate::stats::linreg;
use nalgebra::{Complex, Matrix3, Matrix6, Vector3, Vector6};
use std::f64::consts::PI;
use std::sync::Arc;

pub type C64 = Complex<f64>;

/// Lower bound on radii count; the low-k trend diagnostic needs four shells.
const MIN_RADII: usize = 4;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Direction/radius product grid in Fourier space. Directions follow the
/// Fibonacci-sphere layout (quasi-uniform), radii are log-spaced.
#[derive(Clone, Debug)]
pub struct KGrid {
    directions: Vec<Vector3<f64>>,
    radii: Vec<f64>,
    id: u64,
}

impl KGrid {
    pub fn from_parts(directions: Vec<Vector3<f64>>, radii: Vec<f64>) -> Result<Self> {
        if directions.len() < 4 {
            return Err(Error::InvalidParam("grid needs at least 4 directions".into()));
        }
        if radii.len() < MIN_RADII {
            return Err(Error::InvalidParam(format!("grid needs at least {MIN_RADII} radii")));
        }
        for d in &directions {
            if (d.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParam(format!("direction {d:?} is not unit length")));
            }
        }
        if !(radii[0] > 0.0) {
            return Err(Error::InvalidParam("smallest radius must be positive".into()));
        }
        for w in radii.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidParam("radii must be strictly increasing".into()));
            }
        }
        let mut bytes = Vec::with_capacity(8 * (3 * directions.len() + radii.len()));
        for d in &directions {
            for c in [d.x, d.y, d.z] {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        for r in &radii {
            bytes.extend_from_slice(&r.to_le_bytes());
        }
        let id = fnv1a(bytes);
        Ok(KGrid { directions, radii, id })
    }

    /// Fibonacci directions and log radii spanning [k_min, k_max].
    pub fn new(n_dirs: usize, n_radii: usize, k_min: f64, k_max: f64) -> Result<Self> {
        if !(k_min > 0.0 && k_max > k_min && k_max.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "need 0 < k_min < k_max, got [{k_min}, {k_max}]"
            )));
        }
        let golden = PI * (3.0 - 5.0f64.sqrt());
        let dirs: Vec<Vector3<f64>> = (0..n_dirs)
            .map(|i| {
                let z = 1.0 - (2 * i + 1) as f64 / n_dirs as f64;
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                Vector3::new(rho * phi.cos(), rho * phi.sin(), z).normalize()
            })
            .collect();
        let lk0 = k_min.ln();
        let lk1 = k_max.ln();
        let mut radii: Vec<f64> = (0..n_radii)
            .map(|j| (lk0 + (lk1 - lk0) * j as f64 / (n_radii - 1) as f64).exp())
            .collect();
        radii[0] = k_min;
        radii[n_radii - 1] = k_max;
        Self::from_parts(dirs, radii)
    }

    /// Default resolution: 64 directions, 48 radii on [0.1, 10].
    pub fn standard() -> Self {
        Self::new(64, 48, 0.1, 10.0).expect("standard grid parameters are valid")
    }

    pub fn directions(&self) -> &[Vector3<f64>] {
        &self.directions
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn k_min(&self) -> f64 {
        self.radii[0]
    }

    pub fn k_max(&self) -> f64 {
        *self.radii.last().unwrap()
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn n_nodes(&self) -> usize {
        self.directions.len() * self.radii.len()
    }

    pub fn node(&self, dir_idx: usize, rad_idx: usize) -> Vector3<f64> {
        self.directions[dir_idx] * self.radii[rad_idx]
    }
}

/// CF values on a grid. `origin` is kept separately (phi(0) = 1 for any
/// probability law; test functions may carry other values).
#[derive(Clone, Debug)]
pub struct CharGrid {
    grid: Arc<KGrid>,
    values: Vec<C64>,
    origin: C64,
}

impl CharGrid {
    pub fn from_fn(grid: &Arc<KGrid>, mut f: impl FnMut(&Vector3<f64>) -> C64) -> Self {
        let n_rad = grid.radii.len();
        let mut values = Vec::with_capacity(grid.n_nodes());
        for d in 0..grid.directions.len() {
            for r in 0..n_rad {
                values.push(f(&grid.node(d, r)));
            }
        }
        let origin = f(&Vector3::zeros());
        CharGrid { grid: Arc::clone(grid), values, origin }
    }

    pub fn grid(&self) -> &KGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<KGrid> {
        &self.grid
    }

    pub fn value(&self, dir_idx: usize, rad_idx: usize) -> C64 {
        self.values[dir_idx * self.grid.radii.len() + rad_idx]
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn origin(&self) -> C64 {
        self.origin
    }
}

fn ecf_impl(e: &Ensemble, grid: &Arc<KGrid>, radius_scale: f64) -> CharGrid {
    let n = e.len() as f64;
    let n_rad = grid.radii.len();
    let mut values = vec![C64::new(0.0, 0.0); grid.n_nodes()];
    let mut dots = vec![0.0f64; e.len()];
    for (d_idx, dir) in grid.directions.iter().enumerate() {
        for (j, v) in e.velocities().iter().enumerate() {
            dots[j] = dir.dot(v);
        }
        for (r_idx, &r) in grid.radii.iter().enumerate() {
            let k = r * radius_scale;
            let mut re = 0.0;
            let mut im = 0.0;
            for &t in &dots {
                let (s, c) = (k * t).sin_cos();
                re += c;
                im -= s;
            }
            values[d_idx * n_rad + r_idx] = C64::new(re / n, im / n);
        }
    }
    CharGrid { grid: Arc::clone(grid), values, origin: C64::new(1.0, 0.0) }
}

/// Empirical characteristic function phi(k) = (1/N) sum of exp(-i k.v_j).
pub fn ecf(e: &Ensemble, grid: &Arc<KGrid>) -> CharGrid {
    ecf_impl(e, grid, 1.0)
}

/// Empirical CF of the dilated law: values of phi at alpha * k for every
/// grid node. Comparing a profile against a dilated reference this way keeps
/// the dilation exact at the argument level (no interpolation).
pub fn ecf_scaled(e: &Ensemble, grid: &Arc<KGrid>, alpha: f64) -> Result<CharGrid> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParam(format!("dilation must be positive, got {alpha}")));
    }
    Ok(ecf_impl(e, grid, alpha))
}

/// Quadratic-weighted sup distance over the grid, with the diagnostic that
/// guards its validity: a rising trend of the shell maxima toward small |k|
/// signals unequal first moments (the distance diverges there).
#[derive(Clone, Debug)]
pub struct D2Report {
    pub value: f64,
    pub argmax: (usize, usize),
    pub argmax_node: Vector3<f64>,
    pub low_k_divergence: bool,
}

pub fn d2(a: &CharGrid, b: &CharGrid) -> Result<D2Report> {
    if a.grid.id != b.grid.id {
        return Err(Error::GridMismatch { a: a.grid.id, b: b.grid.id });
    }
    let grid = &a.grid;
    let n_rad = grid.radii.len();
    let mut best = -1.0;
    let mut arg = (0usize, 0usize);
    let mut shell_max = vec![0.0f64; n_rad];
    for d in 0..grid.directions.len() {
        for r in 0..n_rad {
            let idx = d * n_rad + r;
            let num = (a.values[idx] - b.values[idx]).norm();
            let val = num / (grid.radii[r] * grid.radii[r]);
            if val > best {
                best = val;
                arg = (d, r);
            }
            if val > shell_max[r] {
                shell_max[r] = val;
            }
        }
    }
    let mut low_k_divergence = false;
    if shell_max[..MIN_RADII].iter().all(|&v| v > 0.0) {
        let xs: Vec<f64> = grid.radii[..MIN_RADII].iter().map(|r| r.ln()).collect();
        let ys: Vec<f64> = shell_max[..MIN_RADII].iter().map(|v| v.ln()).collect();
        let (slope, _, _) = linreg(&xs, &ys);
        low_k_divergence = slope < -0.5;
    }
    Ok(D2Report {
        value: best.max(0.0),
        argmax: arg,
        argmax_node: grid.node(arg.0, arg.1),
        low_k_divergence,
    })
}

/// Root-mean CF sampling noise scale for an N-particle empirical measure.
pub fn cf_sup_noise(n: usize) -> f64 {
    2.0 / (n as f64).sqrt()
}

/// d2 between independent same-law ensembles for a list of seed pairs; the
/// empirical distribution of these values is the noise floor used by the
/// statistical pass bands.
pub fn calibrate_d2_floor(
    law: &InitialData,
    n: usize,
    grid: &Arc<KGrid>,
    master_seed: u64,
    pairs: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let e1 = init_ensemble(law, n, crate::rng::derive_seed(master_seed, &format!("floor:a:{i}")))?;
        let e2 = init_ensemble(law, n, crate::rng::derive_seed(master_seed, &format!("floor:b:{i}")))?;
        out.push(d2(&ecf(&e1, grid), &ecf(&e2, grid))?.value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spherical triangulation of the direction set (convex hull) and the CF
// interpolant built on it.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct SphereTriangulation {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    vertex_faces: Vec<Vec<u32>>,
}

fn face_normal(vs: &[Vector3<f64>], f: &[usize; 3]) -> Vector3<f64> {
    (vs[f[1]] - vs[f[0]]).cross(&(vs[f[2]] - vs[f[0]]))
}

impl SphereTriangulation {
    /// Incremental convex hull. Direction sets on the sphere are in convex
    /// position, so every input point becomes a hull vertex.
    fn build(vertices: Vec<Vector3<f64>>) -> Result<Self> {
        let n = vertices.len();
        if n < 4 {
            return Err(Error::InvalidParam("triangulation needs at least 4 directions".into()));
        }
        let vs = &vertices;
        // seed tetrahedron: spread points
        let i0 = 0;
        let i1 = (0..n)
            .max_by(|&a, &b| (vs[a] - vs[i0]).norm().total_cmp(&(vs[b] - vs[i0]).norm()))
            .unwrap();
        let i2 = (0..n)
            .max_by(|&a, &b| {
                let ca = (vs[a] - vs[i0]).cross(&(vs[i1] - vs[i0])).norm();
                let cb = (vs[b] - vs[i0]).cross(&(vs[i1] - vs[i0])).norm();
                ca.total_cmp(&cb)
            })
            .unwrap();
        let base_n = (vs[i1] - vs[i0]).cross(&(vs[i2] - vs[i0]));
        let i3 = (0..n)
            .max_by(|&a, &b| {
                let da = base_n.dot(&(vs[a] - vs[i0])).abs();
                let db = base_n.dot(&(vs[b] - vs[i0])).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        if base_n.dot(&(vs[i3] - vs[i0])).abs() < 1e-12 {
            return Err(Error::InvalidParam("directions are degenerate (coplanar)".into()));
        }
        let centroid = (vs[i0] + vs[i1] + vs[i2] + vs[i3]) / 4.0;
        let orient = |f: [usize; 3]| -> [usize; 3] {
            if face_normal(vs, &f).dot(&(vs[f[0]] - centroid)) < 0.0 {
                [f[0], f[2], f[1]]
            } else {
                f
            }
        };
        let mut faces: Vec<[usize; 3]> =
            vec![orient([i0, i1, i2]), orient([i0, i1, i3]), orient([i0, i2, i3]), orient([i1, i2, i3])];
        let seed = [i0, i1, i2, i3];
        for p in 0..n {
            if seed.contains(&p) {
                continue;
            }
            let pt = vs[p];
            let visible: Vec<usize> = (0..faces.len())
                .filter(|&fi| {
                    let f = &faces[fi];
                    face_normal(vs, f).dot(&(pt - vs[f[0]])) > 1e-12
                })
                .collect();
            if visible.is_empty() {
                continue;
            }
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for &fi in &visible {
                let f = faces[fi];
                edges.push((f[0], f[1]));
                edges.push((f[1], f[2]));
                edges.push((f[2], f[0]));
            }
            let horizon: Vec<(usize, usize)> = edges
                .iter()
                .filter(|&&(a, b)| !edges.contains(&(b, a)))
                .copied()
                .collect();
            let mut keep: Vec<[usize; 3]> = faces
                .iter()
                .enumerate()
                .filter(|(fi, _)| !visible.contains(fi))
                .map(|(_, f)| *f)
                .collect();
            for (a, b) in horizon {
                keep.push([a, b, p]);
            }
            faces = keep;
        }
        let mut vertex_faces = vec![Vec::new(); n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                vertex_faces[v].push(fi as u32);
            }
        }
        Ok(SphereTriangulation { vertices, faces, vertex_faces })
    }

    /// Barycentric weights of the spherical triangle containing the unit
    /// direction q (gnomonic: solve q as a nonnegative combination of the
    /// corner vectors, then normalize the coefficients).
    fn locate(&self, q: &Vector3<f64>) -> ([usize; 3], [f64; 3]) {
        let weights_in = |f: &[usize; 3]| -> Option<[f64; 3]> {
            let m = Matrix3::from_columns(&[
                self.vertices[f[0]],
                self.vertices[f[1]],
                self.vertices[f[2]],
            ]);
            let x = m.lu().solve(q)?;
            if x.iter().all(|&c| c >= -1e-9) {
                let s = x[0] + x[1] + x[2];
                if s > 0.0 {
                    return Some([x[0] / s, x[1] / s, x[2] / s]);
                }
            }
            None
        };
        let mut best_v = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, v) in self.vertices.iter().enumerate() {
            let d = v.dot(q);
            if d > best_dot {
                best_dot = d;
                best_v = i;
            }
        }
        for &fi in &self.vertex_faces[best_v] {
            let f = self.faces[fi as usize];
            if let Some(w) = weights_in(&f) {
                return (f, w);
            }
        }
        // rare fallback: scan everything, then pick the least-negative fit
        for f in &self.faces {
            if let Some(w) = weights_in(f) {
                return (*f, w);
            }
        }
        let mut best_f = self.faces[0];
        let mut best_min = f64::NEG_INFINITY;
        let mut best_w = [1.0 / 3.0; 3];
        for f in &self.faces {
            let m = Matrix3::from_columns(&[
                self.vertices[f[0]],
                self.vertices[f[1]],
                self.vertices[f[2]],
            ]);
            if let Some(x) = m.lu().solve(q) {
                let mn = x.iter().cloned().fold(f64::INFINITY, f64::min);
                if mn > best_min {
                    best_min = mn;
                    best_f = *f;
                    let s: f64 = x.iter().map(|c| c.max(0.0)).sum();
                    if s > 0.0 {
                        best_w = [x[0].max(0.0) / s, x[1].max(0.0) / s, x[2].max(0.0) / s];
                    }
                }
            }
        }
        (best_f, best_w)
    }
}

/// How the interpolant treats query radii below the grid's smallest shell.
#[derive(Clone, Debug)]
pub enum LowKPolicy {
    /// Refuse sub-grid queries; evaluators report the offending radius.
    Strict,
    /// Quadratic model phi ~ origin * (1 - k.M k / 2) with M fitted from the
    /// innermost shell; adequate for CFs of centered laws.
    Quadratic(Matrix3<f64>),
}

/// Evaluate a CF at arbitrary wave vectors.
pub trait CfEval {
    fn eval(&self, k: &Vector3<f64>) -> Result<C64>;
    fn origin(&self) -> C64 {
        C64::new(1.0, 0.0)
    }
}

/// CF given in closed form.
pub struct AnalyticCf<F: Fn(&Vector3<f64>) -> C64> {
    f: F,
    origin: C64,
}

impl<F: Fn(&Vector3<f64>) -> C64> AnalyticCf<F> {
    pub fn new(f: F) -> Self {
        let origin = f(&Vector3::zeros());
        AnalyticCf { f, origin }
    }
}

impl<F: Fn(&Vector3<f64>) -> C64> CfEval for AnalyticCf<F> {
    fn eval(&self, k: &Vector3<f64>) -> Result<C64> {
        Ok((self.f)(k))
    }

    fn origin(&self) -> C64 {
        self.origin
    }
}

/// Grid-backed CF interpolant: linear over the spherical triangulation of
/// the direction set, linear in log radius between shells.
pub struct GridInterp {
    cf: CharGrid,
    tri: SphereTriangulation,
    ln_radii: Vec<f64>,
    policy: LowKPolicy,
}

impl GridInterp {
    /// Interpolant with the quadratic sub-grid model fitted from the
    /// innermost shell.
    pub fn new(cf: &CharGrid) -> Result<Self> {
        let m = fit_low_k_model(cf)?;
        Self::with_policy(cf, LowKPolicy::Quadratic(m))
    }

    /// Interpolant that refuses sub-grid radii.
    pub fn strict(cf: &CharGrid) -> Result<Self> {
        Self::with_policy(cf, LowKPolicy::Strict)
    }

    pub fn with_policy(cf: &CharGrid, policy: LowKPolicy) -> Result<Self> {
        let tri = SphereTriangulation::build(cf.grid.directions.clone())?;
        let ln_radii = cf.grid.radii.iter().map(|r| r.ln()).collect();
        Ok(GridInterp { cf: cf.clone(), tri, ln_radii, policy })
    }

    pub fn policy(&self) -> &LowKPolicy {
        &self.policy
    }

    fn eval_on_shells(&self, q: &Vector3<f64>, r: f64) -> C64 {
        let grid = &self.cf.grid;
        let n_rad = grid.radii.len();
        let u = r.ln();
        let hi = self
            .ln_radii
            .partition_point(|&lr| lr < u)
            .clamp(1, n_rad - 1);
        let lo = hi - 1;
        let span = self.ln_radii[hi] - self.ln_radii[lo];
        let frac = ((u - self.ln_radii[lo]) / span).clamp(0.0, 1.0);
        let (face, w) = self.tri.locate(q);
        let mut acc = C64::new(0.0, 0.0);
        for (vi, wi) in face.iter().zip(&w) {
            let a = self.cf.values[vi * n_rad + lo];
            let b = self.cf.values[vi * n_rad + hi];
            acc += (a * (1.0 - frac) + b * frac) * *wi;
        }
        acc
    }
}

/// Least-squares fit of the symmetric curvature matrix M from the innermost
/// shell: 2(1 - Re phi(k))/|k|^2 against the direction quadratic.
fn fit_low_k_model(cf: &CharGrid) -> Result<Matrix3<f64>> {
    let grid = &cf.grid;
    let n_rad = grid.radii.len();
    let r0 = grid.radii[0];
    let mut ata = Matrix6::<f64>::zeros();
    let mut atb = Vector6::<f64>::zeros();
    for (d_idx, dir) in grid.directions.iter().enumerate() {
        let phi = cf.values[d_idx * n_rad];
        let y = 2.0 * (1.0 - phi.re / cf.origin.re.max(f64::MIN_POSITIVE)) / (r0 * r0);
        let x = Vector6::new(
            dir.x * dir.x,
            dir.y * dir.y,
            dir.z * dir.z,
            2.0 * dir.x * dir.y,
            2.0 * dir.x * dir.z,
            2.0 * dir.y * dir.z,
        );
        ata += x * x.transpose();
        atb += x * y;
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::InvalidParam("low-k curvature fit is singular".into()))?;
    Ok(Matrix3::new(
        sol[0], sol[3], sol[4],
        sol[3], sol[1], sol[5],
        sol[4], sol[5], sol[2],
    ))
}

impl CfEval for GridInterp {
    fn eval(&self, k: &Vector3<f64>) -> Result<C64> {
        let grid = &self.cf.grid;
        let r = k.norm();
        if r < 1e-300 {
            return Ok(self.cf.origin);
        }
        let k_min = grid.k_min();
        let k_max = grid.k_max();
        if r < k_min {
            return match &self.policy {
                LowKPolicy::Strict => {
                    Err(Error::InterpolationOutOfRange { radius: r, kmin: k_min, kmax: k_max })
                }
                LowKPolicy::Quadratic(m) => {
                    let q = 0.5 * k.dot(&(m * k));
                    Ok(self.cf.origin * C64::new(1.0 - q, 0.0))
                }
            };
        }
        if r > k_max * (1.0 + 1e-12) {
            return Err(Error::InterpolationOutOfRange { radius: r, kmin: k_min, kmax: k_max });
        }
        let rc = r.min(k_max);
        Ok(self.eval_on_shells(&(k / r), rc))
    }

    fn origin(&self) -> C64 {
        self.cf.origin
    }
}

// ---------------------------------------------------------------------------
// Collision evaluator in Fourier space.
// ---------------------------------------------------------------------------

/// Product quadrature over the scattering sphere for a truncated kernel:
/// Gauss-Legendre in log polar angle (resolves the grazing concentration)
/// times a uniform azimuth. Weights carry the angle density, so summing a
/// function of sigma against `weights` approximates the kernel-weighted
/// spherical integral.
pub struct SphericalQuad {
    thetas: Vec<f64>,
    weights: Vec<f64>,
    n_azimuth: usize,
}

impl SphericalQuad {
    pub fn new(kernel: &CutoffKernel, n_polar: usize, n_azimuth: usize) -> Result<Self> {
        if n_polar < 4 || n_azimuth < 4 {
            return Err(Error::InvalidParam("spherical quadrature needs at least 4x4 points".into()));
        }
        let (gx, gw) = gauss_legendre(n_polar);
        let lo = kernel.theta_min().ln();
        let hi = PI.ln();
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut thetas = Vec::with_capacity(n_polar);
        let mut weights = Vec::with_capacity(n_polar);
        for (&x, &w) in gx.iter().zip(&gw) {
            let u = mid + half * x;
            let theta = u.exp();
            thetas.push(theta);
            weights.push(w * half * theta * kernel.base().b_sin_theta(theta) * 2.0 * PI
                / n_azimuth as f64);
        }
        Ok(SphericalQuad { thetas, weights, n_azimuth })
    }

    /// Default order 64 x 32.
    pub fn standard(kernel: &CutoffKernel) -> Result<Self> {
        Self::new(kernel, 64, 32)
    }

    /// Sum of all weights; approximates the kernel's total rate.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.n_azimuth as f64
    }
}

fn orthonormal_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let e1 = seed.cross(n).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

enum BobylevMode {
    /// phi(k+) phi(k-) - phi(k) phi(0): the full bilinear collision action.
    Full,
    /// phi(k+) + phi(k-): the gain part of the linearization around the
    /// steady ray; on |k|^p it reproduces (S_n - lambda_n(p)) |k|^p.
    GainLinear,
}

fn bobylev_driver<E: CfEval>(
    eval: &E,
    grid: &Arc<KGrid>,
    quad: &SphericalQuad,
    mode: BobylevMode,
    low_k_budget: f64,
) -> Result<CharGrid> {
    let n_rad = grid.radii.len();
    let n_dirs = grid.directions.len();
    let phi0 = eval.origin();
    let total_w: f64 = quad.weights.iter().sum::<f64>() * quad.n_azimuth as f64;
    let mut values = vec![C64::new(0.0, 0.0); grid.n_nodes()];
    for d_idx in 0..n_dirs {
        let khat = grid.directions[d_idx];
        let (e1, e2) = orthonormal_frame(&khat);
        for r_idx in 0..n_rad {
            let r = grid.radii[r_idx];
            let k = khat * r;
            let phi_k = match eval.eval(&k) {
                Ok(v) => v,
                Err(Error::InterpolationOutOfRange { radius, kmin, kmax }) => {
                    return Err(Error::InterpolationOutOfRange { radius, kmin, kmax })
                }
                Err(e) => return Err(e),
            };
            let mut acc = C64::new(0.0, 0.0);
            let mut below_weight = 0.0;
            let mut worst_radius = f64::INFINITY;
            for (&theta, &w) in quad.thetas.iter().zip(&quad.weights) {
                let (st, ct) = theta.sin_cos();
                for j in 0..quad.n_azimuth {
                    let phi_az = 2.0 * PI * (j as f64 + 0.5) / quad.n_azimuth as f64;
                    let (sp, cp) = phi_az.sin_cos();
                    let sigma = khat * ct + (e1 * cp + e2 * sp) * st;
                    let kp = (k + sigma * r) * 0.5;
                    let km = (k - sigma * r) * 0.5;
                    let mut get = |q: &Vector3<f64>| -> Result<C64> {
                        match eval.eval(q) {
                            Ok(v) => Ok(v),
                            Err(Error::InterpolationOutOfRange { radius, .. }) => {
                                below_weight += w;
                                worst_radius = worst_radius.min(radius);
                                // clamp to the innermost shell along the ray
                                let qn = q.norm();
                                let scaled = q * (grid.k_min() * (1.0 + 1e-9) / qn);
                                eval.eval(&scaled)
                            }
                            Err(e) => Err(e),
                        }
                    };
                    let term = match mode {
                        BobylevMode::Full => get(&kp)? * get(&km)? - phi_k * phi0,
                        BobylevMode::GainLinear => get(&kp)? + get(&km)?,
                    };
                    acc += term * w;
                }
            }
            if below_weight > low_k_budget * total_w {
                return Err(Error::InterpolationOutOfRange {
                    radius: worst_radius,
                    kmin: grid.k_min(),
                    kmax: grid.k_max(),
                });
            }
            values[d_idx * n_rad + r_idx] = acc;
        }
    }
    Ok(CharGrid { grid: Arc::clone(grid), values, origin: C64::new(0.0, 0.0) })
}

/// Collision action on a gridded CF. Sub-grid radii in k- are served by the
/// quadratic low-k model, so grazing angles never leave the domain.
pub fn bobylev_apply(phi: &CharGrid, kernel: &CutoffKernel, n_polar: usize, n_azimuth: usize) -> Result<CharGrid> {
    let quad = SphericalQuad::new(kernel, n_polar, n_azimuth)?;
    let interp = GridInterp::new(phi)?;
    bobylev_driver(&interp, phi.grid_arc(), &quad, BobylevMode::Full, 1.0)
}

/// Collision action without the low-k model: errs when more than
/// `low_k_budget` of the quadrature weight requires sub-grid radii.
pub fn bobylev_apply_strict(
    phi: &CharGrid,
    kernel: &CutoffKernel,
    n_polar: usize,
    n_azimuth: usize,
    low_k_budget: f64,
) -> Result<CharGrid> {
    let quad = SphericalQuad::new(kernel, n_polar, n_azimuth)?;
    let interp = GridInterp::strict(phi)?;
    bobylev_driver(&interp, phi.grid_arc(), &quad, BobylevMode::Full, low_k_budget)
}

/// Collision action for a CF in closed form (no interpolation error).
pub fn bobylev_apply_analytic<F: Fn(&Vector3<f64>) -> C64>(
    f: F,
    grid: &Arc<KGrid>,
    quad: &SphericalQuad,
) -> Result<CharGrid> {
    let eval = AnalyticCf::new(f);
    bobylev_driver(&eval, grid, quad, BobylevMode::Full, 0.0)
}

/// Gain linearization phi(k+) + phi(k-) integrated against the kernel; on
/// the homogeneous ray |k|^p it acts as multiplication by S_n - lambda_n(p).
pub fn linearized_gain_analytic<F: Fn(&Vector3<f64>) -> C64>(
    f: F,
    grid: &Arc<KGrid>,
    quad: &SphericalQuad,
) -> Result<CharGrid> {
    let eval = AnalyticCf::new(f);
    bobylev_driver(&eval, grid, quad, BobylevMode::GainLinear, 0.0)
}

// ---------------------------------------------------------------------------
// Contraction / comparison / interpolation diagnostics.
// ---------------------------------------------------------------------------

/// Entrywise L1 norm of a drift matrix, the size measure the growth
/// allowances are stated in.
pub fn matrix_l1_norm(a: &Matrix3<f64>) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

#[derive(Clone, Debug)]
pub struct ContractionReport {
    pub pass: bool,
    pub degenerate: bool,
    pub d2_initial: f64,
    pub max_ratio: f64,
    pub worst_time: f64,
    pub worst_node: Vector3<f64>,
    pub tol: f64,
    pub margin: f64,
    pub ratios: Vec<(f64, f64)>,
}

/// Verify d2(f_t, g_t) <= exp(2 |A| t) d2(f_0, g_0) along two CF snapshot
/// trajectories sharing grid and times. The pass band inflates the bound by
/// 10 noise floors relative to the initial distance.
pub fn check_contraction(
    run_a: &[(f64, CharGrid)],
    run_b: &[(f64, CharGrid)],
    a_norm_l1: f64,
    noise_floor: f64,
) -> Result<ContractionReport> {
    if run_a.len() != run_b.len() || run_a.is_empty() {
        return Err(Error::InvalidParam("snapshot trajectories must align and be nonempty".into()));
    }
    for ((ta, _), (tb, _)) in run_a.iter().zip(run_b) {
        if (ta - tb).abs() > 1e-12 * (1.0 + ta.abs()) {
            return Err(Error::InvalidParam(format!("snapshot times differ: {ta} vs {tb}")));
        }
    }
    let d0 = d2(&run_a[0].1, &run_b[0].1)?;
    if d0.low_k_divergence {
        return Err(Error::UnequalMeans);
    }
    let degenerate = d0.value <= 3.0 * noise_floor;
    let mut ratios = Vec::with_capacity(run_a.len());
    let mut max_ratio = f64::NEG_INFINITY;
    let mut worst_time = run_a[0].0;
    let mut worst_node = d0.argmax_node;
    let denom0 = if degenerate { noise_floor.max(f64::MIN_POSITIVE) } else { d0.value };
    for ((t, cf_a), (_, cf_b)) in run_a.iter().zip(run_b) {
        let dt = d2(cf_a, cf_b)?;
        let allowed = (2.0 * a_norm_l1 * (t - run_a[0].0)).exp() * denom0;
        let ratio = dt.value / allowed;
        if ratio > max_ratio {
            max_ratio = ratio;
            worst_time = *t;
            worst_node = dt.argmax_node;
        }
        ratios.push((*t, ratio));
    }
    let tol = 1.0 + 10.0 * noise_floor / denom0;
    let pass = degenerate || max_ratio <= tol;
    Ok(ContractionReport {
        pass,
        degenerate,
        d2_initial: d0.value,
        max_ratio,
        worst_time,
        worst_node,
        tol,
        margin: tol - max_ratio,
        ratios,
    })
}

/// Nonnegative least-squares fit of |phi0 - psi0| against C1 |k|^p + C2 |k|^2,
/// then inflated so the envelope strictly dominates at t = 0 with a 10%
/// safety factor.
pub fn fit_comparison_envelope(phi0: &CharGrid, psi0: &CharGrid, p: f64) -> Result<(f64, f64)> {
    if phi0.grid.id != psi0.grid.id {
        return Err(Error::GridMismatch { a: phi0.grid.id, b: psi0.grid.id });
    }
    let grid = &phi0.grid;
    let n_rad = grid.radii.len();
    // The |k|^2 coefficient is the second-moment mismatch, read off the
    // innermost shell where the difference is still purely quadratic; the
    // |k|^p coefficient then covers the remainder across the whole grid.
    // Both maxima are exact, so the pair dominates the data by construction.
    let k0 = grid.radii[0];
    let mut c2 = 0.0f64;
    for d in 0..grid.directions.len() {
        let y = (phi0.values[d * n_rad] - psi0.values[d * n_rad]).norm();
        c2 = c2.max(y / (k0 * k0));
    }
    let mut c1 = 0.0f64;
    for d in 0..grid.directions.len() {
        for r in 0..n_rad {
            let y = (phi0.values[d * n_rad + r] - psi0.values[d * n_rad + r]).norm();
            let k = grid.radii[r];
            c1 = c1.max((y - c2 * k * k) / k.powf(p));
        }
    }
    // headroom so the strict initial-hypothesis check cannot trip on rounding
    Ok((c1 * (1.0 + 1e-9) + 1e-15, c2 * (1.0 + 1e-9) + 1e-15))
}

#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub pass: bool,
    pub c1: f64,
    pub c2: f64,
    pub violations: usize,
    pub worst_margin: f64,
    pub worst_time: f64,
    pub worst_node: Vector3<f64>,
    /// Per-time max over |k| >= 1 of (delta - C2 growth term)/|k|^p.
    pub envelope: Vec<(f64, f64)>,
    /// Log-linear decay rate of the envelope while it clears the noise.
    pub envelope_rate: Option<f64>,
}

/// Two-envelope comparison bound along CF trajectories:
/// |phi_t - psi_t|(k) <= C1 e^{-(lambda_p - p|A|) t} |k|^p
///                      + C2 e^{2|A| t} |k|^2 + noise_band.
pub fn check_comparison(
    run_a: &[(f64, CharGrid)],
    run_b: &[(f64, CharGrid)],
    p: f64,
    a_norm_l1: f64,
    lambda_p: f64,
    c1: f64,
    c2: f64,
    noise_band: f64,
) -> Result<ComparisonReport> {
    if run_a.len() != run_b.len() || run_a.is_empty() {
        return Err(Error::InvalidParam("snapshot trajectories must align and be nonempty".into()));
    }
    if !(p > 2.0) {
        return Err(Error::InvalidParam(format!("comparison order must exceed 2, got {p}")));
    }
    let grid = &run_a[0].1.grid;
    let n_rad = grid.radii.len();
    let t0 = run_a[0].0;
    // strict hypothesis at t = 0
    {
        let (pa, pb) = (&run_a[0].1, &run_b[0].1);
        if pa.grid.id != pb.grid.id {
            return Err(Error::GridMismatch { a: pa.grid.id, b: pb.grid.id });
        }
        let mut bad = Vec::new();
        for d in 0..grid.directions.len() {
            for r in 0..n_rad {
                let y = (pa.values[d * n_rad + r] - pb.values[d * n_rad + r]).norm();
                let k = grid.radii[r];
                if y > c1 * k.powf(p) + c2 * k * k + 1e-14 {
                    bad.push((d, r, y));
                }
            }
        }
        if !bad.is_empty() {
            let (d, r, y) = bad[0];
            return Err(Error::HypothesisFails(format!(
                "{} nodes violate the initial envelope; first at direction {d}, |k| = {}, gap {y:e}",
                bad.len(),
                grid.radii[r]
            )));
        }
    }
    let rate_p = lambda_p - p * a_norm_l1;
    let mut violations = 0usize;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_time = t0;
    let mut worst_node = grid.node(0, 0);
    let mut envelope = Vec::with_capacity(run_a.len());
    for ((t, cf_a), (_, cf_b)) in run_a.iter().zip(run_b) {
        if cf_a.grid.id != grid.id || cf_b.grid.id != grid.id {
            return Err(Error::GridMismatch { a: cf_a.grid.id, b: cf_b.grid.id });
        }
        let tau = t - t0;
        let decay = (-rate_p * tau).exp();
        let grow = (2.0 * a_norm_l1 * tau).exp();
        let mut env: f64 = 0.0;
        for d in 0..grid.directions.len() {
            for r in 0..n_rad {
                let y = (cf_a.values[d * n_rad + r] - cf_b.values[d * n_rad + r]).norm();
                let k = grid.radii[r];
                let bound = c1 * k.powf(p) * decay + c2 * k * k * grow;
                let margin = y - bound - noise_band;
                if margin > 0.0 {
                    violations += 1;
                }
                if margin > worst_margin {
                    worst_margin = margin;
                    worst_time = *t;
                    worst_node = grid.node(d, r);
                }
                if k >= 1.0 {
                    env = env.max((y - c2 * k * k * grow) / k.powf(p));
                }
            }
        }
        envelope.push((*t, env));
    }
    // fit the envelope decay while it stays above the resolvable level
    let env_floor = noise_band; // |k| >= 1, so |k|^p >= 1 divides noise through
    let usable: Vec<(f64, f64)> = envelope
        .iter()
        .filter(|(_, e)| *e > 3.0 * env_floor)
        .map(|&(t, e)| (t, e.ln()))
        .collect();
    let envelope_rate = if usable.len() >= 4 {
        let xs: Vec<f64> = usable.iter().map(|u| u.0).collect();
        let ys: Vec<f64> = usable.iter().map(|u| u.1).collect();
        let (slope, _, _) = linreg(&xs, &ys);
        Some(-slope)
    } else {
        None
    };
    Ok(ComparisonReport {
        pass: violations == 0,
        c1,
        c2,
        violations,
        worst_margin,
        worst_time,
        worst_node,
        envelope,
        envelope_rate,
    })
}

#[derive(Clone, Debug)]
pub struct InterpolationBound {
    pub gamma: f64,
    pub bound: f64,
    pub measured_d2: f64,
    pub ratio: f64,
}

/// Mixed-weight sup gamma = sup |phi-psi| / (|k|^2 (1 + |k|^{p-2})) and the
/// induced d2 bound gamma + gamma^{2/p} (unit constant), reported together
/// with the measured d2 so the empirical constant is visible.
pub fn interpolation_bound(phi: &CharGrid, psi: &CharGrid, p: f64) -> Result<InterpolationBound> {
    if phi.grid.id != psi.grid.id {
        return Err(Error::GridMismatch { a: phi.grid.id, b: psi.grid.id });
    }
    if !(p > 2.0) {
        return Err(Error::InvalidParam(format!("order must exceed 2, got {p}")));
    }
    let grid = &phi.grid;
    let n_rad = grid.radii.len();
    let mut gamma: f64 = 0.0;
    for d in 0..grid.directions.len() {
        for r in 0..n_rad {
            let y = (phi.values[d * n_rad + r] - psi.values[d * n_rad + r]).norm();
            let k = grid.radii[r];
            gamma = gamma.max(y / (k * k * (1.0 + k.powf(p - 2.0))));
        }
    }
    let bound = gamma + gamma.powf(2.0 / p);
    let measured = d2(phi, psi)?.value;
    let ratio = if bound > 0.0 { measured / bound } else { 0.0 };
    Ok(InterpolationBound { gamma, bound, measured_d2: measured, ratio })
}
