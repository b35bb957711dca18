//! Small statistics helpers: compensated sums, means with standard errors,
//! empirical characteristic functions and a percentile bootstrap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamKey;

/// Neumaier-compensated accumulator; order of `add` calls fixes the result.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut k = KahanSum::new();
    for x in it {
        k.add(x);
    }
    k.value()
}

/// Sample mean with its standard error (None for fewer than two samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
    pub n: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: None, n };
        }
        let mean = kahan_sum(xs.iter().copied()) / n as f64;
        let se = if n > 1 {
            let var = kahan_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
            Some((var / n as f64).sqrt())
        } else {
            None
        };
        MeanSe { mean, se, n }
    }

    pub fn se_or_inf(&self) -> f64 {
        self.se.unwrap_or(f64::INFINITY)
    }

    /// |mean − target| ≤ k·SE.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se_or_inf()
    }

    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target) / self.se_or_inf()
    }
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = MeanSe::of(xs);
    if xs.len() < 2 {
        return f64::NAN;
    }
    kahan_sum(xs.iter().map(|x| (x - m.mean).powi(2))) / (xs.len() - 1) as f64
}

/// Empirical covariance of paired samples with the standard error of the
/// estimate (delta method on the products).
pub fn covariance_se(x: &[f64], y: &[f64]) -> MeanSe {
    let mx = MeanSe::of(x).mean;
    let my = MeanSe::of(y).mean;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let mut m = MeanSe::of(&prods);
    let n = x.len() as f64;
    if n > 1.0 {
        m.mean *= n / (n - 1.0);
    }
    m
}

/// Percentile bootstrap confidence interval of `stat` over resampled rows.
pub fn bootstrap_ci<T, F>(rows: &[T], stat: F, resamples: usize, level: f64, key: StreamKey) -> (f64, f64)
where
    F: Fn(&[&T]) -> f64,
{
    if rows.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = key.sequential();
    let mut stats = Vec::with_capacity(resamples);
    let mut sample: Vec<&T> = Vec::with_capacity(rows.len());
    for _ in 0..resamples {
        sample.clear();
        for _ in 0..rows.len() {
            sample.push(&rows[rng.random_range(0..rows.len())]);
        }
        stats.push(stat(&sample));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    (quantile_sorted(&stats, alpha), quantile_sorted(&stats, 1.0 - alpha))
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Least-squares slope of y against x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = MeanSe::of(x).mean;
    let my = MeanSe::of(y).mean;
    let sxy = kahan_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = kahan_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    sxy / sxx
}

/// Two-sided Kolmogorov–Smirnov statistic of a sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Asymptotic KS critical value at level 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Ljung–Box Q statistic for the first `lags` autocorrelations.
pub fn ljung_box(xs: &[f64], lags: usize) -> f64 {
    let n = xs.len() as f64;
    let m = MeanSe::of(xs).mean;
    let c0 = kahan_sum(xs.iter().map(|x| (x - m).powi(2)));
    let mut q = 0.0;
    for k in 1..=lags {
        let ck = kahan_sum((k..xs.len()).map(|i| (xs[i] - m) * (xs[i - k] - m)));
        let r = ck / c0;
        q += r * r / (n - k as f64);
    }
    n * (n + 2.0) * q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut k = KahanSum::new();
        k.add(1e16);
        for _ in 0..1000 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.value(), 1000.0);
    }

    #[test]
    fn mean_se_basics() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se.unwrap() - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(MeanSe::of(&[3.0]).se.is_none());
        assert!(MeanSe::of(&[]).mean.is_nan());
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert!((ols_slope(&x, &y) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn bootstrap_interval_brackets_mean() {
        let data: Vec<f64> = (0..200).map(|i| (i % 10) as f64).collect();
        let (lo, hi) = bootstrap_ci(
            &data,
            |s| s.iter().map(|x| **x).sum::<f64>() / s.len() as f64,
            300,
            0.95,
            StreamKey::new(1, 0, 0),
        );
        assert!(lo < 4.5 && 4.5 < hi, "{lo} {hi}");
    }
}
