//! Adaptive Dormand-Prince 5(4) integration for the small linear systems in
//! this crate (6-vector moment states, 3x3 frame matrices). States are plain
//! slices; the right-hand side writes its result into a caller buffer.

use crate::error::{Error, Result};

/// Dormand-Prince tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
/// 5th-order solution weights (same as the last A row; FSAL form).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded 4th-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_STEPS: usize = 2_000_000;

/// Integrate dy/dt = f(t, y) from t0 through every point of `t_grid`
/// (strictly increasing, t_grid[0] >= t0), returning the state at each grid
/// point. Mixed error control: |err_i| <= atol + rtol * |y_i|.
pub fn integrate<F>(mut f: F, t0: f64, y0: &[f64], t_grid: &[f64], rtol: f64, atol: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y0.len();
    for w in t_grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidParam("time grid must be strictly increasing".into()));
        }
    }
    if let Some(&first) = t_grid.first() {
        if first < t0 {
            return Err(Error::InvalidParam("time grid starts before t0".into()));
        }
    }
    let mut out = Vec::with_capacity(t_grid.len());
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut ytmp = vec![0.0; dim];
    let mut y5 = vec![0.0; dim];
    let mut h: f64 = 0.0; // chosen per target below
    let mut steps = 0usize;

    for &target in t_grid {
        if target == t {
            out.push(y.clone());
            continue;
        }
        if h <= 0.0 {
            h = (target - t) * 1e-2;
        }
        while t < target {
            h = h.min(target - t);
            // stage 0
            f(t, &y, &mut k[0]);
            for s in 1..=5 {
                for i in 0..dim {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += A[s - 1][j] * kj[i];
                    }
                    ytmp[i] = y[i] + h * acc;
                }
                f(t + C[s - 1] * h, &ytmp, &mut k[s]);
            }
            // 5th-order candidate, then the FSAL stage at t + h
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(6) {
                    acc += A[5][j] * kj[i];
                }
                y5[i] = y[i] + h * acc;
            }
            f(t + h, &y5, &mut k[6]);
            // embedded error estimate
            let mut err: f64 = 0.0;
            for i in 0..dim {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += (B5[j] - B4[j]) * kj[i];
                }
                let sc = atol + rtol * y[i].abs().max(y5[i].abs());
                let r = h * e / sc;
                err += r * r;
            }
            let err = (err / dim as f64).sqrt();
            if err <= 1.0 {
                t += h;
                y.copy_from_slice(&y5);
            }
            let factor = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
            h *= factor.clamp(0.2, 5.0);
            if !h.is_finite() || h <= f64::EPSILON * t.abs().max(1.0) {
                return Err(Error::OdeFailure(format!("step size collapsed at t = {t}")));
            }
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::OdeFailure("step budget exhausted".into()));
            }
        }
        t = target; // guard against accumulated drift below resolution
        out.push(y.clone());
    }
    Ok(out)
}
