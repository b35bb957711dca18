//! Multi-dimensional complex FFT on n^d row-major lattices (axis 0 fastest).

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct FftNd {
    n: usize,
    d: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FftNd({}^{})", self.n, self.d)
    }
}

impl FftNd {
    pub fn new(n: usize, d: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftNd { n, d, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalised forward transform Σ_k a_k e^{−2πi m·k/n}.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply(data, &self.fwd);
    }

    /// Unnormalised inverse transform Σ_m a_m e^{+2πi m·k/n}.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply(data, &self.inv);
    }

    fn apply(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len(), "lattice size mismatch");
        let n = self.n;
        // Axis 0 is contiguous: rustfft transforms consecutive chunks.
        plan.process(data);
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let mut stride = n;
        for _axis in 1..self.d {
            let block = stride * n;
            for base in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = data[base + offset + j * stride];
                    }
                    plan.process(&mut line);
                    for (j, v) in line.iter().enumerate() {
                        data[base + offset + j * stride] = *v;
                    }
                }
            }
            stride = block;
        }
    }
}

/// Signed minimal-image offset of a lattice index on a ring of size n.
pub fn signed_index(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Multi-index of a flat lattice index (axis 0 fastest).
pub fn unflatten(mut idx: usize, n: usize, d: usize, out: &mut [usize]) {
    for slot in out.iter_mut().take(d) {
        *slot = idx % n;
        idx /= n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_dimensional_transform_matches_direct_sum() {
        let (n, d) = (4usize, 2usize);
        let f = FftNd::new(n, d);
        let data: Vec<Complex64> = (0..16).map(|i| Complex64::new(i as f64 * 0.3, (i * i) as f64 * 0.01)).collect();
        let mut fast = data.clone();
        f.forward(&mut fast);
        for m in 0..16 {
            let (m0, m1) = (m % n, m / n);
            let mut s = Complex64::new(0.0, 0.0);
            for (k, v) in data.iter().enumerate() {
                let (k0, k1) = (k % n, k / n);
                let ph = -2.0 * std::f64::consts::PI * ((m0 * k0 + m1 * k1) as f64) / n as f64;
                s += v * Complex64::from_polar(1.0, ph);
            }
            assert!((s - fast[m]).norm() < 1e-12);
        }
        f.inverse(&mut fast);
        for (a, b) in fast.iter().zip(&data) {
            assert!((a / 16.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn minimal_image() {
        assert_eq!(signed_index(0, 8), 0);
        assert_eq!(signed_index(4, 8), 4);
        assert_eq!(signed_index(5, 8), -3);
    }
}
