//! Chaos measures of lattice fields against test functions.
//!
//! Every integral is a midpoint Riemann sum with cell weight h^d over the
//! sites where the test function is nonzero, accumulated in lattice order
//! with compensated summation. Exponents are split as
//! e^{Re z − max Re z}·e^{i Im z} so that large real parts never overflow
//! silently.

use std::f64::consts::{E, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_sampler::{GridField, GridSpec, ScaleMeta};
use crate::kernel_core::{ComplexGamma, Kernel, Mollifier};
use crate::radial::bump;
use crate::stats::KahanSum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// e·exp(−1/(1−|x/R|²)), peak 1
    Bump { radius: f64 },
    /// cos²(π|x|/(2R)) on |x| < R
    CosineWindow { radius: f64 },
    /// ≡ 1 on the whole lattice box
    Unit,
    /// |g|² for an inner test function g
    ModulusSquared { inner: Box<TestFunction> },
    /// e^{i ξ·x} g(x)
    Modulated { inner: Box<TestFunction>, xi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub id: String,
    pub profile: Profile,
    /// Complex amplitude multiplying the profile.
    pub amp: [f64; 2],
}

impl TestFunction {
    pub fn bump(radius: f64) -> Result<Self> {
        Self::check_radius(radius)?;
        Ok(TestFunction { id: format!("bump(R={radius})"), profile: Profile::Bump { radius }, amp: [1.0, 0.0] })
    }

    pub fn cosine_window(radius: f64) -> Result<Self> {
        Self::check_radius(radius)?;
        Ok(TestFunction {
            id: format!("coswin(R={radius})"),
            profile: Profile::CosineWindow { radius },
            amp: [1.0, 0.0],
        })
    }

    pub fn unit() -> Self {
        TestFunction { id: "unit".into(), profile: Profile::Unit, amp: [1.0, 0.0] }
    }

    /// Registry lookup for CLI presets.
    pub fn preset(name: &str, radius: f64) -> Result<Self> {
        match name {
            "bump" => Self::bump(radius),
            "coswin" => Self::cosine_window(radius),
            "unit" => Ok(Self::unit()),
            _ => Err(Error::Registry { kind: "test function".into(), name: name.into(), valid: "bump, coswin, unit".into() }),
        }
    }

    fn check_radius(radius: f64) -> Result<()> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Input(format!("test function radius must be positive, got {radius}")));
        }
        Ok(())
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        let a = self.amplitude() * c;
        TestFunction { id: format!("({:.4}{:+.4}i)·{}", c.re, c.im, self.id), profile: self.profile.clone(), amp: [a.re, a.im] }
    }

    pub fn conj(&self) -> Self {
        let mut g = self.clone();
        g.amp[1] = -g.amp[1];
        if let Profile::Modulated { inner, xi } = &g.profile {
            g.profile = Profile::Modulated { inner: Box::new(inner.conj()), xi: xi.iter().map(|v| -v).collect() };
        }
        g.id = format!("conj({})", self.id);
        g
    }

    pub fn modulus_squared(&self) -> Self {
        TestFunction {
            id: format!("|{}|²", self.id),
            profile: Profile::ModulusSquared { inner: Box::new(self.clone()) },
            amp: [1.0, 0.0],
        }
    }

    pub fn modulated(&self, xi: &[f64]) -> Self {
        TestFunction {
            id: format!("e^(iξx)·{}", self.id),
            profile: Profile::Modulated { inner: Box::new(self.clone()), xi: xi.to_vec() },
            amp: [1.0, 0.0],
        }
    }

    pub fn amplitude(&self) -> Complex64 {
        Complex64::new(self.amp[0], self.amp[1])
    }

    /// Support radius (infinite for the unit function).
    pub fn radius(&self) -> f64 {
        match &self.profile {
            Profile::Bump { radius } | Profile::CosineWindow { radius } => *radius,
            Profile::Unit => f64::INFINITY,
            Profile::ModulusSquared { inner } | Profile::Modulated { inner, .. } => inner.radius(),
        }
    }

    /// Upper bound on |f|.
    pub fn sup_bound(&self) -> f64 {
        let base = match &self.profile {
            Profile::Bump { .. } | Profile::CosineWindow { .. } | Profile::Unit => 1.0,
            Profile::ModulusSquared { inner } => inner.sup_bound().powi(2),
            Profile::Modulated { inner, .. } => inner.sup_bound(),
        };
        base * self.amplitude().norm()
    }

    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let base = match &self.profile {
            Profile::Bump { radius } => Complex64::new(E * bump(r / radius, 1.0), 0.0),
            Profile::CosineWindow { radius } => {
                if r >= *radius {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new((0.5 * PI * r / radius).cos().powi(2), 0.0)
                }
            }
            Profile::Unit => Complex64::new(1.0, 0.0),
            Profile::ModulusSquared { inner } => Complex64::new(inner.eval(x).norm_sqr(), 0.0),
            Profile::Modulated { inner, xi } => {
                let ph: f64 = xi.iter().zip(x).map(|(a, b)| a * b).sum();
                inner.eval(x) * Complex64::from_polar(1.0, ph)
            }
        };
        base * self.amplitude()
    }

    /// Nonzero lattice values (site index, f(x_site)) in lattice order.
    pub fn on_grid(&self, grid: &GridSpec) -> Vec<(usize, Complex64)> {
        (0..grid.len())
            .filter_map(|i| {
                let p = grid.point(i);
                let v = self.eval(&p[..grid.d]);
                (v != Complex64::new(0.0, 0.0)).then_some((i, v))
            })
            .collect()
    }

    /// Riemann sum of f over the lattice (the discrete ∫f).
    pub fn lattice_integral(&self, grid: &GridSpec) -> Complex64 {
        let (mut re, mut im) = (KahanSum::new(), KahanSum::new());
        for (_, v) in self.on_grid(grid) {
            re.add(v.re);
            im.add(v.im);
        }
        Complex64::new(re.value(), im.value()) * grid.cell_volume()
    }
}

/// Which deterministic factor has been applied to a raw chaos sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renormalization {
    None,
    /// multiplied by √(π·scale/2), scale = log(1/ε) or t
    Critical,
    /// divided by v(ε, θ, γ)
    VEps,
    /// divided by v(t, γ)
    VT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureScale {
    pub eps: Option<f64>,
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSample {
    pub value: [f64; 2],
    pub gamma: ComplexGamma,
    pub scale: MeasureScale,
    pub f_id: String,
    pub seed_path: String,
    pub renormalization: Renormalization,
}

impl MeasureSample {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.value[0], self.value[1])
    }

    /// Divides by `v` and records the tag.
    pub fn renormalized(&self, v: f64, tag: Renormalization) -> Result<Self> {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Input(format!("renormalisation constant must be positive, got {v}")));
        }
        if self.renormalization != Renormalization::None {
            return Err(Error::Precondition("sample is already renormalised".into()));
        }
        let z = self.value() / v;
        Ok(MeasureSample { value: [z.re, z.im], renormalization: tag, ..self.clone() })
    }
}

/// ∫ f(x) e^{γ field(x) − γ² var/2} dx over the lattice, optionally masked.
pub fn chaos_sum(field: &GridField, gamma: &ComplexGamma, f: &[(usize, Complex64)], var: f64, mask: Option<&[bool]>) -> Result<Complex64> {
    let g = gamma.as_complex();
    let g2 = g * g;
    let shift = -0.5 * g2 * var;
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max_re = f64::NEG_INFINITY;
    for &(i, _) in f {
        if keep(i) {
            max_re = max_re.max(g.re * field.values[i] + shift.re);
        }
    }
    if max_re == f64::NEG_INFINITY {
        return Ok(Complex64::new(0.0, 0.0));
    }
    if !max_re.is_finite() {
        return Err(Error::numerical("chaos sum", "non-finite field values"));
    }
    if max_re > 700.0 {
        return Err(Error::numerical(
            "chaos sum",
            format!("log-modulus of the integrand reaches {max_re:.1}; the sum would overflow"),
        ));
    }
    let (mut re, mut im) = (KahanSum::new(), KahanSum::new());
    for &(i, fv) in f {
        if !keep(i) {
            continue;
        }
        let x = field.values[i];
        let m = (g.re * x + shift.re - max_re).exp();
        let ph = g.im * x + shift.im;
        let w = fv * Complex64::from_polar(m, ph);
        re.add(w.re);
        im.add(w.im);
    }
    Ok(Complex64::new(re.value(), im.value()) * (max_re.exp() * field.grid.cell_volume()))
}

fn check_resolution(grid: &GridSpec, eps: f64) -> Result<()> {
    let h = grid.h();
    if eps < h {
        return Err(Error::Resolution(format!("ε = {eps} is below the lattice spacing {h}")));
    }
    if eps < 2.0 * h {
        log::warn!("ε = {eps} spans fewer than two cells (h = {h})");
    }
    Ok(())
}

fn sample(value: Complex64, gamma: &ComplexGamma, scale: MeasureScale, f: &TestFunction, field: &GridField, r: Renormalization) -> MeasureSample {
    MeasureSample {
        value: [value.re, value.im],
        gamma: *gamma,
        scale,
        f_id: f.id.clone(),
        seed_path: field.seed_path.clone(),
        renormalization: r,
    }
}

/// Pointwise variance of the mollified field a lattice field represents.
pub fn mollified_variance(kernel: &Kernel, moll: &Mollifier, t: Option<f64>) -> Result<f64> {
    match t {
        None => kernel.k_eps(moll, 0.0),
        Some(t) => Ok(kernel.mollified_covariances(moll, t, 0.0)?.k_t_eps),
    }
}

/// M^γ_ε(f) or M^γ_{t,ε}(f), depending on the field's scale tag.
pub fn measure_eps(field: &GridField, kernel: &Kernel, moll: &Mollifier, gamma: &ComplexGamma, f: &TestFunction) -> Result<MeasureSample> {
    let ScaleMeta::Mollified { t, eps } = field.meta else {
        return Err(Error::Precondition(format!("expected a mollified field, got {:?}", field.meta)));
    };
    if (eps - moll.eps).abs() > 1e-12 * eps {
        return Err(Error::Input(format!("field mollified at ε = {eps}, mollifier has ε = {}", moll.eps)));
    }
    check_resolution(&field.grid, eps)?;
    let var = mollified_variance(kernel, moll, t)?;
    let v = chaos_sum(field, gamma, &f.on_grid(&field.grid), var, None)?;
    Ok(sample(v, gamma, MeasureScale { eps: Some(eps), t }, f, field, Renormalization::None))
}

/// Same as [`measure_eps`] with the pointwise variance supplied by the caller
/// (hot loops evaluate it once).
pub fn measure_with_variance(field: &GridField, var: f64, gamma: &ComplexGamma, f: &[(usize, Complex64)]) -> Result<Complex64> {
    chaos_sum(field, gamma, f, var, None)
}

fn martingale_variance(field: &GridField, kernel: &Kernel) -> Result<(f64, f64)> {
    match field.meta {
        ScaleMeta::Martingale { t, with_base } => {
            if !with_base && !kernel.spec().k0.is_zero() {
                return Err(Error::Precondition("field lacks the X₀ part of a nonzero K₀".into()));
            }
            Ok((t, kernel.spec().k0.diag() + t))
        }
        ScaleMeta::Base => Ok((0.0, kernel.spec().k0.diag())),
        other => Err(Error::Precondition(format!("expected X_t, got {other:?}"))),
    }
}

/// M^γ_t(f) = ∫ f e^{γX_t − γ²K_t(x,x)/2}.
pub fn measure_t(field: &GridField, kernel: &Kernel, gamma: &ComplexGamma, f: &TestFunction) -> Result<MeasureSample> {
    let (t, var) = martingale_variance(field, kernel)?;
    let v = chaos_sum(field, gamma, &f.on_grid(&field.grid), var, None)?;
    Ok(sample(v, gamma, MeasureScale { eps: None, t: Some(t) }, f, field, Renormalization::None))
}

#[derive(Debug, Clone)]
pub enum CriticalMode<'a> {
    Eps(&'a Mollifier),
    T,
}

fn check_critical(d: usize, gamma: &ComplexGamma) -> Result<()> {
    let crit = (2.0 * d as f64).sqrt();
    if (gamma.alpha - crit).abs() > 1e-12 * crit || gamma.beta != 0.0 {
        return Err(Error::Domain(format!("critical chaos needs γ = √(2d) = {crit}, got {}+{}i", gamma.alpha, gamma.beta)));
    }
    Ok(())
}

/// √(π·scale/2)·M^{√(2d)}(f) with scale = log(1/ε) or t.
pub fn measure_critical(field: &GridField, kernel: &Kernel, gamma: &ComplexGamma, f: &TestFunction, mode: CriticalMode<'_>) -> Result<MeasureSample> {
    check_critical(kernel.d(), gamma)?;
    let (raw, scale) = match mode {
        CriticalMode::Eps(m) => {
            if m.eps >= 1.0 {
                return Err(Error::Input("critical renormalisation needs ε < 1".into()));
            }
            (measure_eps(field, kernel, m, gamma, f)?, (1.0 / m.eps).ln())
        }
        CriticalMode::T => {
            let s = measure_t(field, kernel, gamma, f)?;
            let t = s.scale.t.expect("martingale sample has t");
            (s, t)
        }
    };
    let factor = critical_factor(scale);
    let z = raw.value() * factor;
    Ok(MeasureSample { value: [z.re, z.im], renormalization: Renormalization::Critical, ..raw })
}

/// √(π·scale/2).
pub fn critical_factor(scale: f64) -> f64 {
    (PI * scale / 2.0).sqrt()
}

/// Per-site max over the ladder of X̄_{t_k}(x) − √(2d)·t_k, from the
/// cumulative star-scale part (without X₀).
pub fn barrier_running_max(slabs: &[GridField], times: &[f64], d: usize) -> Result<Vec<f64>> {
    let first = slabs.first().ok_or_else(|| Error::Precondition("no slab data".into()))?;
    if times.len() != slabs.len() + 1 {
        return Err(Error::Input("need one time per slab plus t = 0".into()));
    }
    let drift = (2.0 * d as f64).sqrt();
    let mut acc = vec![0.0_f64; first.values.len()];
    let mut max = vec![0.0_f64; first.values.len()];
    for (slab, &t) in slabs.iter().zip(&times[1..]) {
        for ((a, m), v) in acc.iter_mut().zip(max.iter_mut()).zip(&slab.values) {
            *a += v;
            *m = m.max(*a - drift * t);
        }
    }
    Ok(max)
}

/// ∫ g e^{√(2d)X_t − dK_t} 1{X̄_s − √(2d)s < q on the ladder up to t}.
pub fn measure_critical_truncated(
    field: &GridField,
    running_max: Option<&[f64]>,
    kernel: &Kernel,
    f: &TestFunction,
    q: f64,
) -> Result<MeasureSample> {
    let running_max = running_max.ok_or_else(|| Error::Precondition("barrier path data missing".into()))?;
    if running_max.len() != field.values.len() {
        return Err(Error::Precondition("path data and field sizes differ".into()));
    }
    let gamma = ComplexGamma::critical_real(kernel.d());
    let (t, var) = martingale_variance(field, kernel)?;
    let mask: Vec<bool> = running_max.iter().map(|&m| m < q).collect();
    let v = chaos_sum(field, &gamma, &f.on_grid(&field.grid), var, Some(&mask))?;
    Ok(sample(v, &gamma, MeasureScale { eps: None, t: Some(t) }, f, field, Renormalization::None))
}

/// Re(e^{−iω} M).
pub fn project_omega(m: &MeasureSample, omega: f64) -> f64 {
    (Complex64::from_polar(1.0, -omega) * m.value()).re
}

/// M̂(ξ) = ∫ ρ(x) e^{iξ·x} e^{γX_ε − γ²K_ε/2} dx.
pub fn fourier_mode(field: &GridField, kernel: &Kernel, moll: &Mollifier, gamma: &ComplexGamma, rho: &TestFunction, xi: &[f64]) -> Result<Complex64> {
    if xi.len() != field.grid.d {
        return Err(Error::Input("frequency dimension differs from the grid".into()));
    }
    Ok(measure_eps(field, kernel, moll, gamma, &rho.modulated(xi))?.value())
}

/// Fourier modes on the cubic frequency grid {dk·j : |j_a| ≤ n}.
#[derive(Debug, Clone, Serialize)]
pub struct FourierModes {
    pub d: usize,
    pub dk: f64,
    pub freqs: Vec<Vec<f64>>,
    pub values: Vec<[f64; 2]>,
}

pub fn fourier_modes(
    field: &GridField,
    kernel: &Kernel,
    moll: &Mollifier,
    gamma: &ComplexGamma,
    rho: &TestFunction,
    dk: f64,
    n: usize,
) -> Result<FourierModes> {
    let d = field.grid.d;
    let ScaleMeta::Mollified { t, .. } = field.meta else {
        return Err(Error::Precondition("expected a mollified field".into()));
    };
    let var = mollified_variance(kernel, moll, t)?;
    let base = rho.on_grid(&field.grid);
    let side = 2 * n + 1;
    let mut freqs = Vec::new();
    let mut values = Vec::new();
    for flat in 0..side.pow(d as u32) {
        let mut xi = vec![0.0; d];
        let mut r = flat;
        for v in xi.iter_mut() {
            *v = ((r % side) as f64 - n as f64) * dk;
            r /= side;
        }
        let modulated: Vec<(usize, Complex64)> = base
            .iter()
            .map(|&(i, v)| {
                let p = field.grid.point(i);
                let ph: f64 = xi.iter().zip(&p[..d]).map(|(a, b)| a * b).sum();
                (i, v * Complex64::from_polar(1.0, ph))
            })
            .collect();
        let m = chaos_sum(field, gamma, &modulated, var, None)?;
        freqs.push(xi);
        values.push([m.re, m.im]);
    }
    Ok(FourierModes { d, dk, freqs, values })
}

/// Σ_ξ (1+|ξ|²)^{ps/2} |M̂(ξ)|^p · dk^d over the frequency grid.
pub fn sobolev_norm_diag(modes: &FourierModes, s: f64, p: f64) -> Result<f64> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Input(format!("need p ≥ 1, got {p}")));
    }
    if s >= -(modes.d as f64) / p {
        log::warn!("s = {s} ≥ −d/p: the discrete norm is not expected to stabilise as the grid grows");
    }
    let mut acc = KahanSum::new();
    for (xi, v) in modes.freqs.iter().zip(&modes.values) {
        let k2: f64 = xi.iter().map(|a| a * a).sum();
        acc.add((1.0 + k2).powf(p * s / 2.0) * Complex64::new(v[0], v[1]).norm().powf(p));
    }
    Ok(acc.value() * modes.dk.powi(modes.d as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_field(grid: GridSpec, v: f64, meta: ScaleMeta) -> GridField {
        GridField { grid, values: vec![v; grid.len()], meta, seed_path: "test".into() }
    }

    #[test]
    fn zero_gamma_gives_riemann_sum() {
        let g = GridSpec::new(1, 1024, 4.0).unwrap();
        let k = crate::kernel_core::KernelSpec::default().build().unwrap();
        let f = TestFunction::bump(0.5).unwrap();
        let field = flat_field(g, 0.7, ScaleMeta::Martingale { t: 2.0, with_base: true });
        let gamma = ComplexGamma::new(1, 0.0, 0.0).unwrap();
        let m = measure_t(&field, &k, &gamma, &f).unwrap();
        assert!((m.value() - f.lattice_integral(&g)).norm() < 1e-14);
    }

    #[test]
    fn zero_field_at_time_zero() {
        let g = GridSpec::new(1, 512, 4.0).unwrap();
        let k = crate::kernel_core::KernelSpec::default().build().unwrap();
        let f = TestFunction::cosine_window(0.5).unwrap();
        let field = flat_field(g, 0.0, ScaleMeta::Martingale { t: 0.0, with_base: true });
        let gamma = ComplexGamma::new(1, 1.2, 0.0).unwrap();
        let m = measure_t(&field, &k, &gamma, &f).unwrap();
        assert!((m.value() - f.lattice_integral(&g)).norm() < 1e-14);
    }

    #[test]
    fn overflow_is_reported() {
        let g = GridSpec::new(1, 64, 4.0).unwrap();
        let k = crate::kernel_core::KernelSpec::default().build().unwrap();
        let f = TestFunction::unit();
        let field = flat_field(g, 1e4, ScaleMeta::Martingale { t: 1.0, with_base: true });
        let gamma = ComplexGamma::new(1, 1.0, 0.0).unwrap();
        assert!(matches!(measure_t(&field, &k, &gamma, &f), Err(Error::Numerical { .. })));
    }

    #[test]
    fn projections() {
        let s = MeasureSample {
            value: [1.5, -2.0],
            gamma: ComplexGamma::triple_point(1),
            scale: MeasureScale { eps: None, t: Some(1.0) },
            f_id: "x".into(),
            seed_path: String::new(),
            renormalization: Renormalization::None,
        };
        assert_eq!(project_omega(&s, 0.0), 1.5);
        assert!((project_omega(&s, PI / 2.0) + 2.0).abs() < 1e-15);
        for w in [0.3, 1.0, 2.2] {
            assert!(project_omega(&s, w).abs() <= s.value().norm() + 1e-15);
        }
    }

    #[test]
    fn critical_factor_value() {
        assert!((critical_factor(4.0) - (2.0 * PI).sqrt()).abs() < 1e-15);
        let k = crate::kernel_core::KernelSpec::default().build().unwrap();
        let g = GridSpec::new(1, 64, 4.0).unwrap();
        let field = flat_field(g, 0.0, ScaleMeta::Martingale { t: 1.0, with_base: true });
        let wrong = ComplexGamma::new(1, 1.0, 0.0).unwrap();
        assert!(matches!(
            measure_critical(&field, &k, &wrong, &TestFunction::unit(), CriticalMode::T),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn test_function_algebra() {
        let f = TestFunction::bump(0.3).unwrap().scaled(Complex64::new(0.0, 2.0));
        let x = [0.1];
        assert!((f.conj().eval(&x) - f.eval(&x).conj()).norm() < 1e-15);
        assert!((f.modulus_squared().eval(&x).re - f.eval(&x).norm_sqr()).abs() < 1e-15);
        assert_eq!(f.eval(&[0.31]), Complex64::new(0.0, 0.0));
        assert!((TestFunction::bump(1.0).unwrap().eval(&[0.0]).re - 1.0).abs() < 1e-15);
        assert!(TestFunction::preset("nope", 1.0).is_err());
    }
}
