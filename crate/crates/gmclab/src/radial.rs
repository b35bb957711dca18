//! Radial-function toolkit: bump profiles, uniform cubic splines, sphere
//! integrals, radial convolutions and radial Fourier transforms in d ≤ 3.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quad::Quad;

/// exp(−s/(1−r²)) on r < 1, zero outside.
pub fn bump(r: f64, sharpness: f64) -> f64 {
    let r2 = r * r;
    if r2 >= 1.0 {
        0.0
    } else {
        (-sharpness / (1.0 - r2)).exp()
    }
}

/// Surface area of the unit sphere S^{d−1} in ℝ^d (Σ₀ = 2, Σ₁ = 2π, Σ₂ = 4π).
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / statrs::function::gamma::gamma(h)
}

pub(crate) fn check_dim(d: usize) -> Result<()> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(Error::Input(format!("dimension must be 1, 2 or 3, got {d}")))
    }
}

/// Cubic spline on a uniform grid with prescribed end slopes.
#[derive(Debug, Clone)]
pub struct Spline {
    x0: f64,
    dx: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    pub fn clamped(x0: f64, dx: f64, y: Vec<f64>, slope0: f64, slope1: f64) -> Self {
        let n = y.len();
        assert!(n >= 3, "spline needs at least three nodes");
        // Tridiagonal system for second derivatives (clamped conditions).
        let mut a = vec![dx / 6.0; n];
        let mut b = vec![2.0 * dx / 3.0; n];
        let mut c = vec![dx / 6.0; n];
        let mut rhs = vec![0.0; n];
        b[0] = dx / 3.0;
        c[0] = dx / 6.0;
        rhs[0] = (y[1] - y[0]) / dx - slope0;
        b[n - 1] = dx / 3.0;
        a[n - 1] = dx / 6.0;
        rhs[n - 1] = slope1 - (y[n - 1] - y[n - 2]) / dx;
        for i in 1..n - 1 {
            rhs[i] = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / dx;
        }
        for i in 1..n {
            let w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = rhs[n - 1] / b[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (rhs[i] - c[i] * m[i + 1]) / b[i];
        }
        Spline { x0, dx, y, m }
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.dx * (self.y.len() - 1) as f64
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.y.len();
        let u = ((x - self.x0) / self.dx).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        (i, u - i as f64)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        let s = 1.0 - t;
        let h2 = self.dx * self.dx / 6.0;
        s * self.y[i] + t * self.y[i + 1] + h2 * ((s * s * s - s) * self.m[i] + (t * t * t - t) * self.m[i + 1])
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        let s = 1.0 - t;
        (self.y[i + 1] - self.y[i]) / self.dx
            + self.dx / 6.0 * ((1.0 - 3.0 * s * s) * self.m[i] + (3.0 * t * t - 1.0) * self.m[i + 1])
    }
}

/// ∫_{S^{d−1}} g(|r e₁ + ρ ω|) dω.
pub fn sphere_integral<G: FnMut(f64) -> f64>(d: usize, r: f64, rho: f64, mut g: G, quad: &Quad) -> Result<f64> {
    match d {
        1 => Ok(g((r - rho).abs()) + g(r + rho)),
        2 => {
            let est = quad.integrate(
                |phi: f64| g((r * r + rho * rho + 2.0 * r * rho * phi.cos()).max(0.0).sqrt()),
                0.0,
                PI,
            )?;
            Ok(2.0 * est.value)
        }
        3 => {
            let est = quad.integrate(
                |u: f64| g((r * r + rho * rho + 2.0 * r * rho * u).max(0.0).sqrt()),
                -1.0,
                1.0,
            )?;
            Ok(2.0 * PI * est.value)
        }
        _ => Err(Error::Input(format!("unsupported dimension {d}"))),
    }
}

/// (F * G)(r) = ∫ F(|r e₁ − w|) G(|w|) dw for radial F, G with G supported
/// in [0, g_support]. `hints` are radii where F changes character.
pub fn radial_convolution<F, G>(
    d: usize,
    r: f64,
    mut f: F,
    mut g: G,
    g_support: f64,
    hints: &[f64],
    quad: &Quad,
) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    G: FnMut(f64) -> f64,
{
    let mut pts = vec![0.0, g_support];
    if r > 0.0 && r < g_support {
        pts.push(r);
    }
    for &h in hints {
        for c in [h - r, r - h, h + r] {
            if c > 0.0 && c < g_support {
                pts.push(c);
            }
        }
    }
    pts.sort_by(|a, b| a.total_cmp(b));
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * g_support);
    let mut inner_err = None;
    let dm1 = (d - 1) as i32;
    let est = quad.integrate_points(
        |rho: f64| {
            let gv = g(rho);
            if gv == 0.0 {
                return 0.0;
            }
            match sphere_integral(d, r, rho, &mut f, quad) {
                Ok(s) => gv * rho.powi(dm1) * s,
                Err(e) => {
                    inner_err.get_or_insert(e);
                    0.0
                }
            }
        },
        &pts,
    )?;
    if let Some(e) = inner_err {
        return Err(e);
    }
    Ok(est.value)
}

/// Radial Fourier transform ∫ F(|x|) e^{−i k·x} dx of F supported in [0, support].
pub fn radial_fourier<F: FnMut(f64) -> f64>(d: usize, k: f64, mut f: F, support: f64, quad: &Quad) -> Result<f64> {
    let k = k.abs();
    // Panels of about half a period keep the oscillatory integrand tame.
    let panels = ((k * support / PI).ceil() as usize).clamp(1, 20_000);
    let pts: Vec<f64> = (0..=panels).map(|i| support * i as f64 / panels as f64).collect();
    let est = match d {
        1 => quad.integrate_points(|r| 2.0 * f(r) * (k * r).cos(), &pts)?,
        2 => quad.integrate_points(|r| 2.0 * PI * f(r) * bessel_j0(k * r) * r, &pts)?,
        3 => quad.integrate_points(|r| 4.0 * PI * f(r) * sinc(k * r) * r * r, &pts)?,
        _ => return Err(Error::Input(format!("unsupported dimension {d}"))),
    };
    Ok(est.value)
}

/// Radial Fourier transform tabulated on k = 0, dk, ..., k_max.
///
/// In d = 1 the transform of a smooth compactly supported profile is taken
/// with the trapezoid rule via one FFT (spectrally accurate); otherwise each
/// node is integrated adaptively.
pub fn fourier_table<F: Fn(f64) -> f64>(
    d: usize,
    f: F,
    support: f64,
    k_max: f64,
    dk: f64,
) -> Result<Vec<f64>> {
    let nk = (k_max / dk).ceil() as usize + 1;
    if d == 1 {
        use rustfft::{num_complex::Complex64, FftPlanner};
        let period = std::f64::consts::TAU / dk;
        let dx_target = (support / 500.0).min(PI / (4.0 * k_max));
        let n = ((period / dx_target).ceil() as usize).next_power_of_two();
        let dx = period / n as f64;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|j| {
                let x = if j <= n / 2 { j as f64 * dx } else { (j as f64 - n as f64) * dx };
                Complex64::new(f(x.abs()), 0.0)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        fft.process(&mut buf);
        return Ok((0..nk).map(|m| buf[m].re * dx).collect());
    }
    let kernel: fn(f64) -> f64 = match d {
        2 => |x| 2.0 * PI * bessel_j0(x),
        3 => |x| 4.0 * PI * sinc(x),
        _ => return Err(Error::Input(format!("unsupported dimension {d}"))),
    };
    let r_pow = (d - 1) as i32;
    Ok((0..nk)
        .map(|m| {
            let k = m as f64 * dk;
            // Fixed rule: the adaptive one cannot certify relative accuracy once
            // the transform has decayed to the cancellation floor.
            let panels = ((k * support / PI).ceil() as usize).max(16);
            crate::quad::fixed_gl(|r| f(r) * kernel(k * r) * r.powi(r_pow), 0.0, support, panels)
        })
        .collect())
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Bessel function J₀ (power series below 12, Hankel asymptotics above).
pub fn bessel_j0(x: f64) -> f64 {
    let x = x.abs();
    if x < 12.0 {
        let q = -x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..80 {
            let kf = k as f64;
            term *= q / (kf * kf);
            sum += term;
            if term.abs() < 1e-17 * sum.abs().max(1e-300) && k > 5 {
                break;
            }
        }
        sum
    } else {
        // Hankel expansion: c_k = Π_{j≤k}(2j−1)² / (k!(8x)^k),
        // P = Σ(−1)^m c_{2m}, Q = −Σ(−1)^m c_{2m+1}.
        let z = 8.0 * x;
        let mut p = 1.0;
        let mut q = 0.0;
        let mut c = 1.0;
        for k in 1..=20 {
            let odd = (2 * k - 1) as f64;
            let next = c * odd * odd / (k as f64 * z);
            if next > c {
                break;
            }
            c = next;
            let m = k / 2;
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            if k % 2 == 1 {
                q -= sign * c;
            } else {
                p += sign * c;
            }
        }
        let chi = x - PI / 4.0;
        (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(1) - 2.0).abs() < 1e-14);
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-13);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-13);
    }

    #[test]
    fn spline_reproduces_cubic() {
        let f = |x: f64| x * x * x - x;
        let dx = 0.1;
        let y: Vec<f64> = (0..21).map(|i| f(i as f64 * dx)).collect();
        let s = Spline::clamped(0.0, dx, y, -1.0, 3.0 * 4.0 - 1.0);
        for x in [0.03, 0.55, 1.234, 1.99] {
            assert!((s.eval(x) - f(x)).abs() < 1e-12);
            assert!((s.deriv(x) - (3.0 * x * x - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn bessel_j0_reference_values() {
        // Abramowitz & Stegun table values.
        let cases = [
            (0.0, 1.0),
            (1.0, 0.765_197_686_557_966_6),
            (5.0, -0.177_596_771_314_338_3),
            (10.0, -0.245_935_764_451_348_3),
            (15.0, -0.014_224_472_826_780_773),
            (30.0, -0.086_367_983_581_040_23),
        ];
        for (x, v) in cases {
            assert!((bessel_j0(x) - v).abs() < 1e-10, "J0({x}) = {} vs {v}", bessel_j0(x));
        }
    }

    #[test]
    fn gaussian_fourier_transform() {
        // ∫ e^{−|x|²/2} e^{−ik·x} dx = (2π)^{d/2} e^{−k²/2}
        let q = Quad::with_tol(1e-11);
        for d in 1..=3 {
            for k in [0.0, 1.0, 3.0] {
                let v = radial_fourier(d, k, |r: f64| (-r * r / 2.0).exp(), 12.0, &q).unwrap();
                let exact = (2.0 * PI).powf(d as f64 / 2.0) * (-k * k / 2.0).exp();
                assert!((v - exact).abs() < 1e-8, "d={d} k={k}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn convolution_of_gaussians() {
        // Gaussians of variance 1 and 1/4 convolve to a Gaussian of variance 5/4.
        let q = Quad::with_tol(1e-10);
        for d in 1..=3 {
            let norm = |s2: f64| (2.0 * PI * s2).powf(-(d as f64) / 2.0);
            let r = 0.7;
            let v = radial_convolution(
                d,
                r,
                |x: f64| norm(1.0) * (-x * x / 2.0).exp(),
                |x: f64| norm(0.25) * (-x * x / 0.5).exp(),
                6.0,
                &[],
                &q,
            )
            .unwrap();
            let exact = norm(1.25) * (-r * r / 2.5).exp();
            assert!((v - exact).abs() < 1e-9, "d={d}: {v} vs {exact}");
        }
    }
}
