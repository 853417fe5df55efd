//! Small statistical helpers shared by the diagnostics: least-squares lines
//! and the Mann-Kendall trend test used for moment-boundedness checks.

/// Least-squares fit y = slope * x + intercept. Returns (slope, intercept, r2).
/// Panics if fewer than 2 points.
pub fn linreg(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() >= 2, "need at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

/// Mann-Kendall trend statistic for a time series.
#[derive(Debug, Clone, Copy)]
pub struct MannKendall {
    /// Sum of pairwise sign differences.
    pub s: i64,
    /// Normal-approximation z score.
    pub z: f64,
    /// One-sided test at 5%: evidence of an upward trend.
    pub upward_at_5pct: bool,
}

/// One-sided Mann-Kendall test for an upward trend, normal approximation with
/// tie correction. Sampling should be sparse enough that successive points are
/// roughly independent.
pub fn mann_kendall(series: &[f64]) -> MannKendall {
    let n = series.len();
    assert!(n >= 4, "trend test needs at least 4 points");
    let mut s: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = series[j] - series[i];
            s += if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            };
        }
    }
    // Tie groups for the variance correction.
    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut var = (n * (n - 1) * (2 * n + 5)) as f64 / 18.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = j - i;
        if t > 1 {
            var -= (t * (t - 1) * (2 * t + 5)) as f64 / 18.0;
        }
        i = j;
    }
    let z = if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    MannKendall { s, z, upward_at_5pct: z > 1.6449 }
}
