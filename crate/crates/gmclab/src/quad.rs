//! Adaptive Gauss–Kronrod (7/15) quadrature and fixed Gauss–Legendre rules.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
}

/// Adaptive integrator; converged when the summed error estimate drops below
/// `max(abs_tol, rel_tol * |value|)`.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for Quad {
    fn default() -> Self {
        Quad {
            rel_tol: 1e-8,
            abs_tol: 1e-14,
            max_intervals: 4000,
        }
    }
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let value = kron * h;
    let error = ((kron - gauss) * h).abs();
    (value, error)
}

impl Quad {
    pub fn with_tol(rel_tol: f64) -> Self {
        Quad {
            rel_tol,
            ..Default::default()
        }
    }

    pub fn abs(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<Estimate> {
        self.integrate_points(f, &[a, b])
    }

    /// Integrate over consecutive breakpoints (which must be nondecreasing).
    pub fn integrate_points<F: FnMut(f64) -> f64>(
        &self,
        mut f: F,
        points: &[f64],
    ) -> Result<Estimate> {
        let mut heap = BinaryHeap::new();
        let mut value = 0.0;
        let mut error = 0.0;
        let mut evals = 0;
        for w in points.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !(a.is_finite() && b.is_finite()) {
                return Err(Error::Input(format!("non-finite integration limits [{a}, {b}]")));
            }
            if b <= a {
                continue;
            }
            let (v, e) = gk15(&mut f, a, b);
            evals += 15;
            value += v;
            error += e;
            heap.push(Piece { a, b, value: v, error: e });
        }
        while error > self.abs_tol.max(self.rel_tol * value.abs()) {
            if heap.len() >= self.max_intervals {
                return Err(Error::numerical(
                    "adaptive quadrature",
                    format!(
                        "no convergence after {} intervals: value {value:e}, error estimate {error:e}, tolerance {:e}",
                        heap.len(),
                        self.abs_tol.max(self.rel_tol * value.abs())
                    ),
                ));
            }
            let worst = heap.pop().expect("heap holds at least one piece");
            let m = 0.5 * (worst.a + worst.b);
            if m <= worst.a || m >= worst.b {
                // Interval exhausted at machine resolution; accept what we have.
                heap.push(Piece { error: 0.0, ..worst });
                error -= worst.error;
                continue;
            }
            let (v1, e1) = gk15(&mut f, worst.a, m);
            let (v2, e2) = gk15(&mut f, m, worst.b);
            evals += 30;
            value += v1 + v2 - worst.value;
            error += e1 + e2 - worst.error;
            heap.push(Piece { a: worst.a, b: m, value: v1, error: e1 });
            heap.push(Piece { a: m, b: worst.b, value: v2, error: e2 });
            if !value.is_finite() {
                return Err(Error::numerical("adaptive quadrature", "integrand produced non-finite values"));
            }
        }
        // Re-sum in a fixed order to limit accumulated drift from the running updates.
        let mut pieces: Vec<Piece> = heap.into_vec();
        pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
        let value = pieces.iter().map(|p| p.value).sum();
        Ok(Estimate { value, error: error.max(0.0), evals })
    }
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

pub(crate) fn gl32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(32))
}

/// Fixed composite Gauss–Legendre rule: `panels` panels of 32 points each.
pub fn fixed_gl<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize) -> f64 {
    let (x, w) = gl32();
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        let c = lo + 0.5 * width;
        let h = 0.5 * width;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            s += wi * f(c + h * xi);
        }
        total += s * h;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_exponential_integrals() {
        let q = Quad::with_tol(1e-12);
        let r = q.integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0).unwrap();
        assert!((r.value - 0.0).abs() < 1e-12);
        let r = q.integrate(|x: f64| x.exp(), 0.0, 1.0).unwrap();
        assert!((r.value - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn log_singularity_converges() {
        // ∫_0^1 log(1/x) dx = 1
        let q = Quad::with_tol(1e-10);
        let r = q.integrate(|x: f64| -x.ln(), 0.0, 1.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn breakpoints_and_empty_ranges() {
        let q = Quad::with_tol(1e-12);
        let r = q.integrate_points(|x: f64| x.abs(), &[-1.0, 0.0, 1.0]).unwrap();
        assert!((r.value - 1.0).abs() < 1e-13);
        let r = q.integrate(|x| x, 1.0, 1.0).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn gauss_legendre_is_exact_for_high_degree() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((s - 2.0 / 19.0).abs() < 1e-14);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let v = fixed_gl(|x: f64| x.sin(), 0.0, std::f64::consts::PI, 2);
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn non_convergence_is_reported() {
        let q = Quad { rel_tol: 1e-14, abs_tol: 0.0, max_intervals: 5 };
        let err = q.integrate(|x: f64| (1.0 / x).sin(), 1e-6, 1.0).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
    }
}
