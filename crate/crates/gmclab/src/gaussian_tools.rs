//! Closed-form Gaussian and Brownian facts, with Monte Carlo self-tests.

use std::f64::consts::{E, PI, SQRT_2};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use libm::erfc;

use crate::error::{ensure_finite, Error, Result};
use crate::rng::StreamKey;
use crate::stats::MeanSe;

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// log Φ(x), accurate far into the lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        normal_cdf(x).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

fn check_time(t: f64) -> Result<()> {
    ensure_finite("t", t)?;
    if t <= 0.0 {
        return Err(Error::Input(format!("time horizon must be positive, got {t}")));
    }
    Ok(())
}

/// P[sup_{s≤t} B_s ≤ a] = 2Φ(a/√t) − 1 (reflection principle).
pub fn barrier_prob(t: f64, a: f64) -> Result<f64> {
    check_time(t)?;
    ensure_finite("a", a)?;
    if a <= 0.0 {
        return Ok(0.0);
    }
    Ok(erfc(-a / (2.0 * t).sqrt()) - 1.0)
}

/// P[sup_{s≤t} (B_s + b s) ≤ a] = Φ((a−bt)/√t) − e^{2ab} Φ((−a−bt)/√t).
pub fn drifted_barrier_prob(t: f64, a: f64, b: f64) -> Result<f64> {
    check_time(t)?;
    ensure_finite("a", a)?;
    ensure_finite("b", b)?;
    if a <= 0.0 {
        return Ok(0.0);
    }
    let st = t.sqrt();
    let first = normal_cdf((a - b * t) / st);
    let second = (2.0 * a * b + log_normal_cdf((-a - b * t) / st)).exp();
    Ok((first - second).clamp(0.0, 1.0))
}

/// The two published upper-bound forms for `barrier_prob`: √(2/(πt))·a, which
/// the reflection principle gives, and the looser √(2π/t)·a.
pub fn barrier_upper_bounds(t: f64, a: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    let a = a.max(0.0);
    Ok(((2.0 / (PI * t)).sqrt() * a, (2.0 * PI / t).sqrt() * a))
}

/// P[max_{k≤m} (B_{kΔ} + b kΔ) < a] with Δ = t/m, by propagating the killed
/// transition density on a fine grid. Converges to `drifted_barrier_prob`
/// from above as m grows. Absolute accuracy is about 1e-4 (midpoint grid of
/// width √Δ/24).
///
/// With b replaced by b + λ this is also E[e^{λB_t − λ²t/2}; same event]
/// (Cameron–Martin), which is the form used for truncated critical chaos.
pub fn discrete_barrier_prob(t: f64, steps: usize, a: f64, b: f64) -> Result<f64> {
    check_time(t)?;
    ensure_finite("a", a)?;
    ensure_finite("b", b)?;
    if steps == 0 {
        return Err(Error::Input("need at least one monitoring step".into()));
    }
    if a <= 0.0 {
        return Ok(0.0);
    }
    let dt = t / steps as f64;
    let sigma = dt.sqrt();
    let mean = b * dt;
    let dx = (sigma / 24.0).min(a / 8.0);
    let lower = a.min(0.0) - 12.0 * t.sqrt() - (b * t).abs() - 1.0;
    let n = ((a - lower) / dx).ceil() as usize;
    let x: Vec<f64> = (0..n).map(|i| a - (i as f64 + 0.5) * dx).collect();
    let width = (10.0 * sigma / dx).ceil() as isize;
    let norm = dx / (sigma * (2.0 * PI).sqrt());
    let gauss = |z: f64| norm * (-0.5 * (z / sigma).powi(2)).exp();
    // Density of the first monitored value.
    let mut p: Vec<f64> = x.iter().map(|&xi| gauss(xi - mean) / dx).collect();
    let kernel: Vec<f64> = (-width..=width).map(|j| gauss(j as f64 * dx - mean)).collect();
    for _ in 1..steps {
        let mut next = vec![0.0; n];
        // next[i] = Σ_j p[j] g(x_i − x_j − mean); x_i − x_j = (j − i) dx.
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            let lo = (j as isize - width).max(0) as usize;
            let hi = ((j as isize + width) as usize).min(n - 1);
            for (i, slot) in next.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let off = (j as isize - i as isize + width) as usize;
                *slot += pj * kernel[off];
            }
        }
        p = next;
    }
    Ok((p.iter().sum::<f64>() * dx).clamp(0.0, 1.0))
}

/// Monte Carlo estimate of P[sup_{s≤t}(B_s + bs) ≤ a] on a Δt grid.
///
/// Between grid points the path is completed by Brownian bridges, whose
/// crossing probability exp(−2(a−x)(a−y)/Δt) is known in closed form, so the
/// estimator is unbiased for the continuous-time probability.
pub fn barrier_mc(t: f64, a: f64, b: f64, dt: f64, paths: usize, key: StreamKey) -> Result<MeanSe> {
    check_time(t)?;
    ensure_finite("dt", dt)?;
    if dt <= 0.0 || dt > t {
        return Err(Error::Input(format!("time step must lie in (0, t], got {dt}")));
    }
    if paths == 0 {
        return Err(Error::Input("need at least one path".into()));
    }
    let steps = (t / dt).round().max(1.0) as usize;
    let dt = t / steps as f64;
    let sd = dt.sqrt();
    let cutoff = 40.0 * dt;
    let vals: Vec<f64> = (0..paths as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; steps],
            |buf, path| {
                key.with_purpose(key.purpose ^ path.wrapping_mul(0x9e37_79b9)).normals(0, buf);
                let mut x = 0.0f64;
                let mut survive = 1.0f64;
                for z in buf.iter() {
                    let y = x + sd * z + b * dt;
                    if y >= a {
                        return 0.0;
                    }
                    let gap = (a - x) * (a - y);
                    if gap < cutoff {
                        survive *= 1.0 - (-2.0 * gap / dt).exp();
                    }
                    x = y;
                }
                survive
            },
        )
        .collect();
    Ok(MeanSe::of(&vals))
}

/// Per-probe tilted means against their Cameron–Martin targets.
#[derive(Debug, Clone, Serialize)]
pub struct CameronMartinReport {
    pub tilt_index: usize,
    pub probes: Vec<usize>,
    pub targets: Vec<f64>,
    pub means: Vec<f64>,
    pub ses: Vec<f64>,
    pub pass_3se: bool,
}

/// Samples Y ~ N(0, H) and checks E[Y(z) e^{Y(z₀) − H(z₀,z₀)/2}] = H(z, z₀).
pub fn cameron_martin_check(
    cov: &DMatrix<f64>,
    tilt_index: usize,
    probes: &[usize],
    replicas: usize,
    key: StreamKey,
) -> Result<CameronMartinReport> {
    let n = cov.nrows();
    if cov.ncols() != n || tilt_index >= n || probes.iter().any(|&p| p >= n) {
        return Err(Error::Input("covariance must be square and indices in range".into()));
    }
    if replicas < 2 {
        return Err(Error::Input("need at least two replicas".into()));
    }
    let root = psd_sqrt(cov, 1e-10)?;
    let h00 = cov[(tilt_index, tilt_index)];
    let rows: Vec<Vec<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let z = nalgebra::DVector::from_vec(key.with_purpose(key.purpose.wrapping_add(r << 20)).normal_vec(0, n));
            let y = &root * z;
            let w = (y[tilt_index] - 0.5 * h00).exp();
            probes.iter().map(|&p| y[p] * w).collect()
        })
        .collect();
    let mut means = Vec::new();
    let mut ses = Vec::new();
    let mut pass = true;
    let targets: Vec<f64> = probes.iter().map(|&p| cov[(p, tilt_index)]).collect();
    for (j, &target) in targets.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let s = MeanSe::of(&col);
        pass &= s.within(target, 3.0);
        means.push(s.mean);
        ses.push(s.se_or_inf());
    }
    Ok(CameronMartinReport { tilt_index, probes: probes.to_vec(), targets, means, ses, pass_3se: pass })
}

/// Symmetric PSD square root; eigenvalues below −tol·max are an error,
/// smaller negatives are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min < -tol * max.max(1e-300) {
        return Err(Error::numerical(
            "PSD square root",
            format!("eigenvalue {min:.3e} below −{tol:.1e}·{max:.3e}"),
        ));
    }
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Left side (with standard error) and right side of the exponentiated
/// Gaussian comparison.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExpGaussDistance {
    pub lhs: f64,
    pub lhs_se: f64,
    /// (e² + e)·√(E|X−Y|²)
    pub rhs: f64,
    pub mean_sq_diff: f64,
}

/// E|e^{X − E[X²]/2} − e^{Y − E[Y²]/2}| for X = X₁+iX₂, Y = Y₁+iY₂ with the
/// given joint covariance of (X₁, X₂, Y₁, Y₂).
pub fn exp_gauss_distance(cov: &DMatrix<f64>, replicas: usize, key: StreamKey) -> Result<ExpGaussDistance> {
    if cov.nrows() != 4 || cov.ncols() != 4 {
        return Err(Error::Input("joint covariance must be 4x4".into()));
    }
    if replicas < 2 {
        return Err(Error::Input("need at least two replicas".into()));
    }
    let c = |i: usize, j: usize| cov[(i, j)];
    let msd = c(0, 0) + c(2, 2) - 2.0 * c(0, 2) + c(1, 1) + c(3, 3) - 2.0 * c(1, 3);
    if c(1, 1) > 1.0 + 1e-12 || msd > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!(
            "need E[X₂²] ≤ 1 and E|X−Y|² ≤ 1, got {} and {msd}",
            c(1, 1)
        )));
    }
    use num_complex::Complex64;
    let ex2 = Complex64::new(c(0, 0) - c(1, 1), 2.0 * c(0, 1));
    let ey2 = Complex64::new(c(2, 2) - c(3, 3), 2.0 * c(2, 3));
    let root = psd_sqrt(cov, 1e-10)?;
    let vals: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let z = nalgebra::DVector::from_vec(key.with_purpose(key.purpose.wrapping_add(r << 20)).normal_vec(0, 4));
            let v = &root * z;
            let x = Complex64::new(v[0], v[1]);
            let y = Complex64::new(v[2], v[3]);
            ((x - 0.5 * ex2).exp() - (y - 0.5 * ey2).exp()).norm()
        })
        .collect();
    let s = MeanSe::of(&vals);
    Ok(ExpGaussDistance {
        lhs: s.mean,
        lhs_se: s.se_or_inf(),
        rhs: (E * E + E) * msd.max(0.0).sqrt(),
        mean_sq_diff: msd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_value() {
        assert!((barrier_prob(1.0, 1.0).unwrap() - 0.682_689_492_137_085_9).abs() < 1e-12);
        assert_eq!(barrier_prob(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(barrier_prob(2.0, -1.0).unwrap(), 0.0);
        assert!(barrier_prob(0.0, 1.0).is_err());
    }

    #[test]
    fn drift_zero_matches_reflection() {
        for (t, a) in [(1.0, 1.0), (4.0, 0.3), (9.0, 2.0)] {
            assert!((drifted_barrier_prob(t, a, 0.0).unwrap() - barrier_prob(t, a).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn strong_negative_drift_has_no_overflow() {
        let p = drifted_barrier_prob(100.0, 50.0, -3.0).unwrap();
        assert!(p.is_finite() && p > 0.999);
        let p = drifted_barrier_prob(100.0, 50.0, 3.0).unwrap();
        assert!(p.is_finite() && p >= 0.0);
    }

    #[test]
    fn discrete_monitoring_brackets_continuous() {
        let cont = drifted_barrier_prob(4.0, 1.0, -1.0).unwrap();
        let coarse = discrete_barrier_prob(4.0, 16, 1.0, -1.0).unwrap();
        let fine = discrete_barrier_prob(4.0, 256, 1.0, -1.0).unwrap();
        assert!(coarse > fine && fine > cont, "{coarse} {fine} {cont}");
        // Shifted-barrier correction a + 0.5826·√Δt for discrete monitoring.
        let shifted = drifted_barrier_prob(4.0, 1.0 + 0.5826 * (4.0f64 / 256.0).sqrt(), -1.0).unwrap();
        assert!((fine - shifted).abs() < 2e-3, "{fine} vs {shifted}");
        // One step: P[N(bt, t) < a].
        let one = discrete_barrier_prob(2.0, 1, 0.7, 0.3).unwrap();
        assert!((one - normal_cdf((0.7 - 0.6) / 2f64.sqrt())).abs() < 1e-4);
    }

    #[test]
    fn psd_sqrt_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let r = psd_sqrt(&m, 1e-12).unwrap();
        assert!((&r * &r - &m).norm() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_sqrt(&bad, 1e-10).is_err());
    }
}
