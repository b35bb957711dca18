//! Almost star-scale invariant kernels.
//!
//! The covariance is K(x,y) = K₀(x,y) + ∫₀^∞ (1 − η₁e^{−η₂s}) κ(e^s(x−y)) ds with
//! κ a compactly supported radial positive-definite profile. The martingale
//! truncation K_t integrates up to the reparametrised scale t′, chosen so that
//! the diagonal of K̄_t equals t exactly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::quad::Quad;
use crate::radial::{self, bump, sphere_area, Spline};

/// Spline nodes for tabulated radial profiles on their support.
fn profile_nodes(d: usize) -> usize {
    if d == 1 {
        4096
    } else {
        1024
    }
}
const KAPPA_KMAX: f64 = 800.0;
const KAPPA_DK: f64 = 0.05;
const THETA_KMAX: f64 = 640.0;
const THETA_DK: f64 = 0.025;
/// Log-radius spacing of cached K̄_t tables.
const TABLE_DU: f64 = 0.02;
const TABLE_CACHE_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KappaProfile {
    /// Self-convolution of a bump supported in B(0,1/2), normalised to κ̃(0) = 1.
    #[default]
    SelfConvolvedBump,
    /// κ̃ = 1 on [0,1). Not positive definite; only useful for checking constants.
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseKernel {
    #[default]
    Zero,
    /// amplitude · exp(−|x−y|²/(2 length²))
    Gaussian { amplitude: f64, length: f64 },
}

impl BaseKernel {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            BaseKernel::Zero => 0.0,
            BaseKernel::Gaussian { amplitude, length } => amplitude * (-r * r / (2.0 * length * length)).exp(),
        }
    }

    pub fn diag(&self) -> f64 {
        self.eval(0.0)
    }

    /// Fourier transform in ℝ^d.
    pub fn spectral(&self, d: usize, k: f64) -> f64 {
        match *self {
            BaseKernel::Zero => 0.0,
            BaseKernel::Gaussian { amplitude, length } => {
                amplitude * (2.0 * PI * length * length).powf(d as f64 / 2.0) * (-0.5 * (length * k).powi(2)).exp()
            }
        }
    }

    /// Radius beyond which the kernel is below 1e-17 of its peak.
    pub fn range(&self) -> f64 {
        match *self {
            BaseKernel::Zero => 0.0,
            BaseKernel::Gaussian { length, .. } => 9.0 * length,
        }
    }

    /// Frequency beyond which the spectrum is below e^{−40} of its peak.
    pub fn spectral_support(&self) -> f64 {
        match *self {
            BaseKernel::Zero => 0.0,
            BaseKernel::Gaussian { length, .. } => 9.0 / length,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BaseKernel::Zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub d: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub kappa: KappaProfile,
    pub k0: BaseKernel,
    pub quad_tol: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            d: 1,
            eta1: 0.5,
            eta2: 1.0,
            kappa: KappaProfile::SelfConvolvedBump,
            k0: BaseKernel::Zero,
            quad_tol: 1e-8,
        }
    }
}

impl KernelSpec {
    pub fn with_d(d: usize) -> Self {
        KernelSpec { d, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        radial::check_dim(self.d)?;
        ensure_finite("eta1", self.eta1)?;
        ensure_finite("eta2", self.eta2)?;
        if !(0.0..=1.0).contains(&self.eta1) {
            return Err(Error::Input(format!("eta1 must lie in [0,1], got {}", self.eta1)));
        }
        if self.eta2 <= 0.0 {
            return Err(Error::Input(format!("eta2 must be positive, got {}", self.eta2)));
        }
        if !(self.quad_tol > 0.0 && self.quad_tol < 1e-2) {
            return Err(Error::Input(format!("quad_tol must lie in (0, 1e-2), got {}", self.quad_tol)));
        }
        if let BaseKernel::Gaussian { amplitude, length } = self.k0 {
            if !(amplitude >= 0.0 && length > 0.0 && amplitude.is_finite() && length.is_finite()) {
                return Err(Error::Input("Gaussian K0 needs amplitude ≥ 0 and length > 0".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Kernel> {
        Kernel::new(*self)
    }
}

struct KappaTables {
    profile: Spline,
    /// ∫ κ over ℝ^d
    mass: f64,
    /// b̂ on a uniform k grid, κ̂ = b̂²/(b*b)(0)
    bhat: OnceLock<std::result::Result<Spline, String>>,
    peak: f64,
}

fn half_bump(r: f64) -> f64 {
    bump(2.0 * r, 1.0)
}

fn build_kappa_tables(d: usize) -> Result<KappaTables> {
    let quad = Quad::with_tol(1e-12).abs(1e-18);
    let n = profile_nodes(d);
    let dr = 1.0 / n as f64;
    let raw = (0..=n)
        .into_par_iter()
        .map(|i| {
            if i == n {
                Ok(0.0)
            } else {
                radial::radial_convolution(d, i as f64 * dr, half_bump, half_bump, 0.5, &[0.5], &quad)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let peak = raw[0];
    let vals: Vec<f64> = raw.iter().map(|v| v / peak).collect();
    let profile = Spline::clamped(0.0, dr, vals, 0.0, 0.0);
    let area = sphere_area(d);
    let mass = area
        * quad
            .integrate(|r: f64| profile.eval(r).max(0.0) * r.powi(d as i32 - 1), 0.0, 1.0)?
            .value;
    Ok(KappaTables { profile, mass, bhat: OnceLock::new(), peak })
}

fn kappa_tables(d: usize) -> Result<Arc<KappaTables>> {
    static CELLS: [OnceLock<std::result::Result<Arc<KappaTables>, String>>; 3] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let cell = &CELLS[d - 1];
    cell.get_or_init(|| build_kappa_tables(d).map(Arc::new).map_err(|e| e.to_string()))
        .clone()
        .map_err(|e| Error::numerical("kappa table", e))
}

impl KappaTables {
    fn bhat(&self, d: usize) -> Result<&Spline> {
        self.bhat
            .get_or_init(|| {
                radial::fourier_table(d, half_bump, 0.5, KAPPA_KMAX, KAPPA_DK)
                    .map(|v| Spline::clamped(0.0, KAPPA_DK, v, 0.0, 0.0))
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::numerical("kappa Fourier table", e.clone()))
    }
}

/// Radial table of a kernel in the variable u = log r on [u_min, 0].
///
/// Below r_min the function is extended by `tail_slope · (log r − u_min)`,
/// which is exact to the table tolerance for both the truncated (flat) and the
/// full (logarithmic) kernel.
#[derive(Debug, Clone)]
pub struct RadialTable {
    spline: Spline,
    u_min: f64,
    tail_slope: f64,
}

impl RadialTable {
    pub fn eval(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        if r <= 0.0 {
            return if self.tail_slope == 0.0 { self.spline.eval(self.u_min) } else { f64::INFINITY };
        }
        let u = r.ln();
        if u < self.u_min {
            self.spline.eval(self.u_min) + self.tail_slope * (u - self.u_min)
        } else {
            self.spline.eval(u)
        }
    }
}

/// A value that may be +∞ (the full kernel on the diagonal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    PosInfinity,
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::PosInfinity => None,
        }
    }
}

/// Values of the mollified covariances at one separation r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifiedCov {
    /// K_{t,ε}: covariance of X_{t,ε}
    pub k_t_eps: f64,
    /// K_{t,ε,0}: cross-covariance of X_{t,ε} with X_t
    pub k_t_eps_0: f64,
    pub q_t_eps: f64,
    pub q_t_eps_0: f64,
    pub kbar_t_eps: f64,
}

/// Built kernel: spec plus cached tables. Cheap to clone.
#[derive(Clone)]
pub struct Kernel {
    spec: KernelSpec,
    kappa: Option<Arc<KappaTables>>,
    j: f64,
    tables: Arc<RwLock<HashMap<u64, Arc<RadialTable>>>>,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel").field("spec", &self.spec).field("j", &self.j).finish()
    }
}

impl Kernel {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        let kappa = match spec.kappa {
            KappaProfile::SelfConvolvedBump => Some(kappa_tables(spec.d)?),
            KappaProfile::Indicator => None,
        };
        let mut k = Kernel {
            spec,
            kappa,
            j: 0.0,
            tables: Arc::new(RwLock::new(HashMap::new())),
        };
        k.j = k.compute_j()?;
        Ok(k)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    fn quad(&self) -> Quad {
        Quad::with_tol(self.spec.quad_tol).abs(self.spec.quad_tol * 1e-3)
    }

    fn c(&self) -> f64 {
        self.spec.eta1 / self.spec.eta2
    }

    /// κ̃(r).
    pub fn kappa(&self, r: f64) -> f64 {
        let r = r.abs();
        if r >= 1.0 {
            return 0.0;
        }
        match &self.kappa {
            Some(t) => t.profile.eval(r).clamp(0.0, 1.0),
            None => 1.0,
        }
    }

    fn kappa_deriv(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        match &self.kappa {
            Some(t) => t.profile.deriv(r),
            None => 0.0,
        }
    }

    /// ∫_{ℝ^d} κ.
    pub fn kappa_mass(&self) -> f64 {
        match &self.kappa {
            Some(t) => t.mass,
            None => sphere_area(self.spec.d) / self.spec.d as f64,
        }
    }

    /// Fourier transform κ̂(k) (nonnegative by construction).
    pub fn kappa_hat(&self, k: f64) -> Result<f64> {
        let t = self
            .kappa
            .as_ref()
            .ok_or_else(|| Error::Domain("the indicator profile has no positive-definite spectrum".into()))?;
        let k = k.abs();
        if k >= KAPPA_KMAX {
            return Ok(0.0);
        }
        let b = t.bhat(self.spec.d)?.eval(k);
        Ok(b * b / t.peak)
    }

    /// Minimum of the numerically computed Fourier transform of κ̃ over the
    /// given frequencies, divided by κ̂(0). Independent of the b̂ route.
    pub fn kappa_pd_certificate(&self, freqs: &[f64]) -> Result<f64> {
        let quad = Quad::with_tol(1e-10).abs(1e-14);
        let f0 = radial::radial_fourier(self.spec.d, 0.0, |r| self.kappa(r), 1.0, &quad)?;
        let mut min = f64::INFINITY;
        for &k in freqs {
            let v = radial::radial_fourier(self.spec.d, k, |r| self.kappa(r), 1.0, &quad)?;
            min = min.min(v / f0);
        }
        Ok(min)
    }

    /// Reparametrised scale t′ solving t′ − (η₁/η₂)(1 − e^{−η₂t′}) = t.
    pub fn tprime(&self, t: f64) -> Result<f64> {
        ensure_finite("t", t)?;
        if t < 0.0 {
            return Err(Error::Input(format!("t must be nonnegative, got {t}")));
        }
        let (eta1, eta2) = (self.spec.eta1, self.spec.eta2);
        if eta1 == 0.0 || t == 0.0 {
            return Ok(t);
        }
        let c = self.c();
        let g = |s: f64| s - c * (1.0 - (-eta2 * s).exp()) - t;
        let (mut lo, mut hi) = (t, t + c);
        let mut s = t + c * (1.0 - (-eta2 * (t + c)).exp());
        for _ in 0..200 {
            let gs = g(s);
            if gs.abs() <= 1e-12 * (1.0 + t) {
                return Ok(s);
            }
            if gs < 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let dg = 1.0 - eta1 * (-eta2 * s).exp();
            let newton = s - gs / dg;
            s = if dg > 1e-300 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * (1.0 + t) {
                return Ok(0.5 * (lo + hi));
            }
        }
        Ok(s)
    }

    /// Q_t at separation r: κ̃(e^{t′} r).
    pub fn q_t(&self, t: f64, r: f64) -> Result<f64> {
        let tp = self.tprime(t)?;
        Ok(self.kappa(tp.exp() * r))
    }

    /// Support radius e^{−t′} of Q_t.
    pub fn q_support(&self, t: f64) -> Result<f64> {
        Ok((-self.tprime(t)?).exp())
    }

    fn scale_integral(&self, s_lo: f64, s_hi: f64, r: f64) -> Result<f64> {
        let (eta1, eta2) = (self.spec.eta1, self.spec.eta2);
        let upper = if r > 0.0 { s_hi.min(-r.ln()) } else { s_hi };
        if upper <= s_lo {
            return Ok(0.0);
        }
        let est = self.quad().integrate(
            |s: f64| (1.0 - eta1 * (-eta2 * s).exp()) * self.kappa(s.exp() * r),
            s_lo,
            upper,
        )?;
        Ok(est.value)
    }

    /// K̄_t(r) = ∫₀^{t′}(1 − η₁e^{−η₂s}) κ̃(e^s r) ds.
    pub fn bar_k_t(&self, t: f64, r: f64) -> Result<f64> {
        let tp = self.tprime(t)?;
        self.scale_integral(0.0, tp, r.abs())
    }

    /// K̄_{t_hi}(r) − K̄_{t_lo}(r), the covariance of one scale slab.
    pub fn slab_cov(&self, t_lo: f64, t_hi: f64, r: f64) -> Result<f64> {
        if t_hi < t_lo {
            return Err(Error::Input(format!("slab [{t_lo}, {t_hi}] is reversed")));
        }
        let a = self.tprime(t_lo)?;
        let b = self.tprime(t_hi)?;
        self.scale_integral(a, b, r.abs())
    }

    /// K_t(r) = K₀(r) + K̄_t(r).
    pub fn k_t(&self, t: f64, r: f64) -> Result<f64> {
        Ok(self.spec.k0.eval(r) + self.bar_k_t(t, r)?)
    }

    /// lim_{t→∞} K_t(r); the scale integral terminates at s = log(1/r).
    pub fn k_full(&self, r: f64) -> Result<Extended> {
        let r = r.abs();
        ensure_finite("r", r)?;
        if r == 0.0 {
            return Ok(Extended::PosInfinity);
        }
        let upper = (-r.ln()).max(0.0);
        Ok(Extended::Finite(self.spec.k0.eval(r) + self.scale_integral(0.0, upper, r)?))
    }

    pub fn dist(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// K_t(x,y) for explicit points.
    pub fn k_t_points(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.k_t(t, Self::dist(x, y))
    }

    /// 𝔍 = η₁/η₂ + ∫₀^∞(1 − κ̃(e^{−s})) ds.
    pub fn j_const(&self) -> f64 {
        self.j
    }

    fn compute_j(&self) -> Result<f64> {
        // u = e^{−s}: ∫₀¹ (1 − κ̃(u))/u du.
        let quad = Quad::with_tol(self.spec.quad_tol * 0.1).abs(1e-15);
        let est = quad.integrate(
            |u: f64| if u <= 0.0 { 0.0 } else { (1.0 - self.kappa(u)) / u },
            0.0,
            1.0,
        )?;
        Ok(self.c() + est.value)
    }

    /// L(x) = K₀(x,x) − 𝔍, the continuous part of K on the diagonal.
    pub fn l_diag(&self) -> f64 {
        self.spec.k0.diag() - self.j
    }

    /// ℓ̄(z) = ∫₀^∞ (κ̃(e^{η₁/η₂ − u}|z|) − 1) du.
    pub fn bar_ell(&self, z: f64) -> Result<f64> {
        let rho = z.abs();
        ensure_finite("z", rho)?;
        if rho == 0.0 {
            return Ok(0.0);
        }
        let c = self.c();
        let u0 = c + rho.ln();
        let mut pts = vec![0.0];
        if u0 > 0.0 {
            pts.push(u0);
        }
        pts.push(u0.max(0.0) + 30.0);
        let quad = Quad::with_tol(self.spec.quad_tol * 0.1).abs(1e-13);
        let est = quad.integrate_points(|u: f64| self.kappa((c - u).exp() * rho) - 1.0, &pts)?;
        Ok(est.value)
    }

    /// Cached log-radial table of K̄_t (or of K̄_∞ when `t` is None).
    pub fn kbar_table(&self, t: Option<f64>) -> Result<Arc<RadialTable>> {
        let key = t.map_or(u64::MAX, f64::to_bits);
        if let Some(tab) = self.tables.read().expect("table cache poisoned").get(&key) {
            return Ok(tab.clone());
        }
        let tab = Arc::new(self.build_table(t)?);
        let mut w = self.tables.write().expect("table cache poisoned");
        if w.len() >= TABLE_CACHE_LIMIT {
            w.clear();
        }
        w.insert(key, tab.clone());
        Ok(tab)
    }

    fn build_table(&self, t: Option<f64>) -> Result<RadialTable> {
        let (u_min, tail_slope) = match t {
            Some(t) => (-self.tprime(t)? - 14.0, 0.0),
            None => (-40.0, -1.0),
        };
        let n = ((-u_min) / TABLE_DU).ceil() as usize;
        let du = -u_min / n as f64;
        let quad = self.quad();
        let (eta1, eta2) = (self.spec.eta1, self.spec.eta2);
        let tp = match t {
            Some(t) => self.tprime(t)?,
            None => f64::INFINITY,
        };
        let mut vals = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let u = u_min + i as f64 * du;
            let r = u.exp();
            let upper = tp.min(-u);
            let v = if i == n || upper <= 0.0 {
                0.0
            } else {
                quad.integrate(|s: f64| (1.0 - eta1 * (-eta2 * s).exp()) * self.kappa(s.exp() * r), 0.0, upper)?
                    .value
            };
            vals.push(v);
        }
        // Slope in u at the lower end: 0 (truncated) or −(1 − η₁e^{−η₂·∞}) = −1 (full kernel)
        // up to the correction r·κ̃′ terms, which vanish there.
        let slope0 = match t {
            Some(_) => {
                let r = u_min.exp();
                quad.integrate(
                    |s: f64| (1.0 - eta1 * (-eta2 * s).exp()) * self.kappa_deriv(s.exp() * r) * s.exp() * r,
                    0.0,
                    tp,
                )?
                .value
            }
            None => -1.0 + eta1 * u_min.exp().powf(eta2),
        };
        Ok(RadialTable {
            spline: Spline::clamped(u_min, du, vals, slope0, 0.0),
            u_min,
            tail_slope,
        })
    }

    /// Mollified covariances at separation r.
    pub fn mollified_covariances(&self, moll: &Mollifier, t: f64, r: f64) -> Result<MollifiedCov> {
        self.check_moll(moll)?;
        let d = self.spec.d;
        let r = r.abs();
        let eps = moll.eps;
        let tp = self.tprime(t)?;
        let qs = (-tp).exp();
        let tab = self.kbar_table(Some(t))?;
        let quad = self.quad();
        let kbar = |x: f64| tab.eval(x);
        let qf = |x: f64| self.kappa(tp.exp() * x);
        let big = |x: f64| moll.big_theta_eps(x);
        let small = |x: f64| moll.theta_eps(x);
        let hints = [qs, 1.0];
        let kbar_t_eps = radial::radial_convolution(d, r, kbar, big, 2.0 * eps, &hints, &quad)?;
        let kbar_t_eps_0 = radial::radial_convolution(d, r, kbar, small, eps, &hints, &quad)?;
        let q_t_eps = radial::radial_convolution(d, r, qf, big, 2.0 * eps, &hints, &quad)?;
        let q_t_eps_0 = radial::radial_convolution(d, r, qf, small, eps, &hints, &quad)?;
        let (k0_eps, k0_eps_0) = if self.spec.k0.is_zero() {
            (0.0, 0.0)
        } else {
            let k0 = |x: f64| self.spec.k0.eval(x);
            (
                radial::radial_convolution(d, r, k0, big, 2.0 * eps, &[], &quad)?,
                radial::radial_convolution(d, r, k0, small, eps, &[], &quad)?,
            )
        };
        Ok(MollifiedCov {
            k_t_eps: k0_eps + kbar_t_eps,
            k_t_eps_0: k0_eps_0 + kbar_t_eps_0,
            q_t_eps,
            q_t_eps_0,
            kbar_t_eps,
        })
    }

    /// K_ε(r): covariance of the mollified full field X_ε = θ_ε * X.
    pub fn k_eps(&self, moll: &Mollifier, r: f64) -> Result<f64> {
        self.check_moll(moll)?;
        let d = self.spec.d;
        let tab = self.kbar_table(None)?;
        let quad = self.quad();
        let eps = moll.eps;
        let full = radial::radial_convolution(d, r.abs(), |x| tab.eval(x), |x| moll.big_theta_eps(x), 2.0 * eps, &[1.0], &quad)?;
        let k0 = if self.spec.k0.is_zero() {
            0.0
        } else {
            radial::radial_convolution(d, r.abs(), |x| self.spec.k0.eval(x), |x| moll.big_theta_eps(x), 2.0 * eps, &[], &quad)?
        };
        Ok(full + k0)
    }

    fn check_moll(&self, moll: &Mollifier) -> Result<()> {
        if moll.d != self.spec.d {
            return Err(Error::Input(format!(
                "mollifier dimension {} differs from kernel dimension {}",
                moll.d, self.spec.d
            )));
        }
        Ok(())
    }

    /// Frequency beyond which the spectrum of K̄_t vanishes identically.
    pub fn spectral_support(&self, t: f64) -> Result<f64> {
        Ok(KAPPA_KMAX * self.tprime(t)?.exp())
    }

    /// Fourier transform of the slab covariance K̄_{t_hi} − K̄_{t_lo} (t_hi = None means ∞).
    pub fn slab_spectrum(&self, t_lo: f64, t_hi: Option<f64>, k: f64) -> Result<f64> {
        let d = self.spec.d as f64;
        let (eta1, eta2) = (self.spec.eta1, self.spec.eta2);
        let a = self.tprime(t_lo)?;
        let k = k.abs();
        let b = match t_hi {
            Some(t) => self.tprime(t)?,
            None => a.max(k.max(1.0).ln()) + 45.0 / d,
        };
        if b <= a {
            return Ok(0.0);
        }
        // κ̂(e^{−s}k) vanishes while e^{−s}k ≥ KAPPA_KMAX.
        let s_on = if k > 0.0 { (k / KAPPA_KMAX).ln() } else { f64::NEG_INFINITY };
        let lo = a.max(s_on);
        if lo >= b {
            return Ok(0.0);
        }
        let mut pts = vec![lo];
        if k > 1.0 && k.ln() > lo && k.ln() < b {
            pts.push(k.ln());
        }
        pts.push(b);
        let mut err = None;
        let est = Quad::with_tol(1e-10).abs(1e-22).integrate_points(
            |s: f64| {
                let kh = match self.kappa_hat((-s).exp() * k) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                };
                (1.0 - eta1 * (-eta2 * s).exp()) * (-d * s).exp() * kh
            },
            &pts,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(est.value)
    }
}

/// Mollifier profile θ (normalised to unit mass, supported in the unit ball).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaProfile {
    /// ∝ exp(−s/(1−|x|²))
    Bump { sharpness: f64 },
}

impl Default for ThetaProfile {
    fn default() -> Self {
        ThetaProfile::Bump { sharpness: 1.0 }
    }
}

struct ThetaTables {
    norm: f64,
    /// Θ = θ*θ on [0, 2]
    auto: Spline,
    hat: OnceLock<std::result::Result<Spline, String>>,
}

/// θ_ε(x) = ε^{−d} θ(x/ε) with cached θ*θ and θ̂ tables.
#[derive(Clone)]
pub struct Mollifier {
    pub profile: ThetaProfile,
    pub eps: f64,
    pub d: usize,
    tables: Arc<ThetaTables>,
}

impl std::fmt::Debug for Mollifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mollifier")
            .field("profile", &self.profile)
            .field("eps", &self.eps)
            .field("d", &self.d)
            .finish()
    }
}

fn theta_tables(d: usize, profile: ThetaProfile) -> Result<Arc<ThetaTables>> {
    type Cache = RwLock<HashMap<(usize, u64), Arc<ThetaTables>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let ThetaProfile::Bump { sharpness } = profile;
    let key = (d, sharpness.to_bits());
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(t) = cache.read().expect("theta cache poisoned").get(&key) {
        return Ok(t.clone());
    }
    let quad = Quad::with_tol(1e-12).abs(1e-18);
    let mass = sphere_area(d)
        * quad
            .integrate(|r: f64| bump(r, sharpness) * r.powi(d as i32 - 1), 0.0, 1.0)?
            .value;
    let norm = 1.0 / mass;
    let th = |r: f64| norm * bump(r, sharpness);
    let n = profile_nodes(d);
    let dr = 2.0 / n as f64;
    let vals = (0..=n)
        .into_par_iter()
        .map(|i| {
            if i == n {
                Ok(0.0)
            } else {
                radial::radial_convolution(d, i as f64 * dr, th, th, 1.0, &[1.0], &quad)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let t = Arc::new(ThetaTables {
        norm,
        auto: Spline::clamped(0.0, dr, vals, 0.0, 0.0),
        hat: OnceLock::new(),
    });
    cache.write().expect("theta cache poisoned").insert(key, t.clone());
    Ok(t)
}

impl Mollifier {
    pub fn new(d: usize, profile: ThetaProfile, eps: f64) -> Result<Self> {
        radial::check_dim(d)?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Input(format!("mollifier scale must be positive, got {eps}")));
        }
        let ThetaProfile::Bump { sharpness } = profile;
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::Input("bump sharpness must be positive".into()));
        }
        Ok(Mollifier { profile, eps, d, tables: theta_tables(d, profile)? })
    }

    pub fn standard(d: usize, eps: f64) -> Result<Self> {
        Self::new(d, ThetaProfile::default(), eps)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Input(format!("mollifier scale must be positive, got {eps}")));
        }
        Ok(Mollifier { eps, ..self.clone() })
    }

    pub fn normalization(&self) -> f64 {
        self.tables.norm
    }

    /// θ(r) at unit scale.
    pub fn theta(&self, r: f64) -> f64 {
        let ThetaProfile::Bump { sharpness } = self.profile;
        self.tables.norm * bump(r, sharpness)
    }

    pub fn theta_eps(&self, r: f64) -> f64 {
        self.theta(r / self.eps) / self.eps.powi(self.d as i32)
    }

    /// Θ = θ*θ at unit scale, supported in [0,2].
    pub fn big_theta(&self, r: f64) -> f64 {
        if r >= 2.0 {
            0.0
        } else {
            self.tables.auto.eval(r).max(0.0)
        }
    }

    pub fn big_theta_eps(&self, r: f64) -> f64 {
        self.big_theta(r / self.eps) / self.eps.powi(self.d as i32)
    }

    /// θ̂(k) at unit scale (θ̂(0) = 1).
    pub fn theta_hat(&self, k: f64) -> Result<f64> {
        let k = k.abs();
        if k >= THETA_KMAX {
            return Ok(0.0);
        }
        let spline = self
            .tables
            .hat
            .get_or_init(|| {
                radial::fourier_table(self.d, |r| self.theta(r), 1.0, THETA_KMAX, THETA_DK)
                    .map(|v| Spline::clamped(0.0, THETA_DK, v, 0.0, 0.0))
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::numerical("mollifier Fourier table", e.clone()))?;
        Ok(spline.eval(k))
    }

    /// Frequency beyond which θ̂_ε is treated as zero.
    pub fn hat_support(&self) -> f64 {
        THETA_KMAX / self.eps
    }

    pub fn theta_hat_eps(&self, k: f64) -> Result<f64> {
        self.theta_hat(self.eps * k)
    }

    /// ∫θ by quadrature (should be 1).
    pub fn mass(&self) -> Result<f64> {
        let quad = Quad::with_tol(1e-12).abs(1e-16);
        Ok(sphere_area(self.d) * quad.integrate(|r: f64| self.theta(r) * r.powi(self.d as i32 - 1), 0.0, 1.0)?.value)
    }

    /// Even moments ∫ w^{2j} Θ(w) dw in d = 1, j = 1..=count.
    fn big_theta_moments_1d(&self, count: usize) -> Result<Vec<f64>> {
        let quad = Quad::with_tol(1e-12).abs(1e-18);
        (1..=count)
            .map(|j| Ok(2.0 * quad.integrate(|w: f64| w.powi(2 * j as i32) * self.big_theta(w), 0.0, 2.0)?.value))
            .collect()
    }
}

/// ℓ_θ together with I = ∫ e^{γ²ℓ_θ}.
#[derive(Debug, Clone)]
pub struct EllTheta {
    moll: Mollifier,
    pub gamma2: f64,
    pub integral: f64,
    pub error: f64,
}

impl EllTheta {
    /// ℓ_θ(z) = ∫∫ log(1/|z+z₁−z₂|) θ(z₁)θ(z₂) dz₁dz₂ = ∫ log(1/|w|) Θ(|z − w|) dw.
    pub fn at(&self, z: f64) -> Result<f64> {
        ell_theta_value(&self.moll, z.abs())
    }
}

fn ell_theta_value(moll: &Mollifier, rho: f64) -> Result<f64> {
    let quad = Quad::with_tol(1e-10).abs(1e-14);
    radial::radial_convolution(
        moll.d,
        rho,
        |x| moll.big_theta(x),
        |w: f64| if w > 0.0 { -w.ln() } else { 0.0 },
        rho + 2.0,
        &[2.0],
        &quad,
    )
}

/// ℓ_θ for the unit-scale mollifier and I = ∫ e^{γ² ℓ_θ(z)} dz.
pub fn ell_theta(moll: &Mollifier, gamma2: f64) -> Result<EllTheta> {
    let d = moll.d;
    if !(gamma2 > d as f64) {
        return Err(Error::Domain(format!(
            "∫ e^{{γ²ℓ_θ}} diverges unless γ² > d (γ² = {gamma2}, d = {d})"
        )));
    }
    let moll = moll.with_eps(1.0)?;
    let area = sphere_area(d);
    let dm1 = d as i32 - 1;
    let quad = Quad::with_tol(1e-9).abs(1e-14);
    let split: f64 = match d {
        1 => 6.0,
        2 => 2.0,
        _ => 40.0,
    };
    let mut err = None;
    let mut pts = vec![0.0, 1.0, 2.0];
    if split > 2.0 {
        pts.push(split.min(6.0));
        if split > 6.0 {
            pts.push(split);
        }
    }
    let inner = quad.integrate_points(
        |rho: f64| match ell_theta_value(&moll, rho) {
            Ok(l) => rho.powi(dm1) * (gamma2 * l).exp(),
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        },
        &pts,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    let df = d as f64;
    let tail = match d {
        1 => {
            // ℓ_θ(ρ) = log(1/ρ) + Σ_j m_{2j}/(2j ρ^{2j}) for ρ > 2.
            let m = moll.big_theta_moments_1d(12)?;
            let series = |rho: f64| -> f64 {
                m.iter()
                    .enumerate()
                    .map(|(j, mj)| mj / ((2 * j + 2) as f64 * rho.powi(2 * j as i32 + 2)))
                    .sum()
            };
            let pure = split.powf(1.0 - gamma2) / (gamma2 - 1.0);
            let corr = quad
                .integrate(
                    |s: f64| {
                        let rho = split * s.exp();
                        rho.powf(1.0 - gamma2) * ((gamma2 * series(rho)).exp() - 1.0)
                    },
                    0.0,
                    12.0,
                )?
                .value;
            pure + corr
        }
        2 => split.powf(2.0 - gamma2) / (gamma2 - 2.0),
        // Beyond radius 40 the relative correction to log(1/ρ) is O(ρ^{-2}).
        _ => split.powf(df - gamma2) / (gamma2 - df),
    };
    Ok(EllTheta {
        moll,
        gamma2,
        integral: area * (inner.value + tail),
        error: area * inner.error,
    })
}

/// Phase-diagram region of γ = α + iβ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "P_I")]
    PI,
    #[serde(rename = "P_II")]
    PII,
    #[serde(rename = "P_III")]
    PIII,
    #[serde(rename = "P_I_II")]
    BoundaryOneTwo,
    #[serde(rename = "P_II_III")]
    BoundaryTwoThree,
    TriplePoint,
    CriticalReal,
    Other,
}

/// γ = α + iβ with its region label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexGamma {
    pub alpha: f64,
    pub beta: f64,
    pub region: Region,
}

impl ComplexGamma {
    pub fn new(d: usize, alpha: f64, beta: f64) -> Result<Self> {
        classify_gamma(d, alpha, beta)
    }

    pub fn modulus2(&self) -> f64 {
        self.alpha * self.alpha + self.beta * self.beta
    }

    pub fn as_complex(&self) -> num_complex::Complex64 {
        num_complex::Complex64::new(self.alpha, self.beta)
    }

    pub fn triple_point(d: usize) -> Self {
        let a = (d as f64 / 2.0).sqrt();
        ComplexGamma { alpha: a, beta: a, region: Region::TriplePoint }
    }

    pub fn critical_real(d: usize) -> Self {
        ComplexGamma { alpha: (2.0 * d as f64).sqrt(), beta: 0.0, region: Region::CriticalReal }
    }
}

/// Region of γ = α + iβ by the defining inequalities; boundary points get
/// boundary labels (within a relative tolerance of 1e-12).
pub fn classify_gamma(d: usize, alpha: f64, beta: f64) -> Result<ComplexGamma> {
    ensure_finite("alpha", alpha)?;
    ensure_finite("beta", beta)?;
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Input(format!("alpha and beta must be nonnegative, got ({alpha}, {beta})")));
    }
    if d == 0 {
        return Err(Error::Input("dimension must be positive".into()));
    }
    let df = d as f64;
    let tol = 1e-12 * (1.0 + df);
    let half = (df / 2.0).sqrt();
    let crit = (2.0 * df).sqrt();
    let sum = alpha + beta;
    let m2 = alpha * alpha + beta * beta;
    let eq = |a: f64, b: f64| (a - b).abs() <= tol;
    let region = if eq(alpha, half) && eq(beta, half) {
        Region::TriplePoint
    } else if eq(alpha, half) && beta > half {
        Region::BoundaryTwoThree
    } else if eq(sum, crit) && alpha > beta && beta > tol {
        Region::BoundaryOneTwo
    } else if eq(alpha, crit) && beta <= tol {
        Region::CriticalReal
    } else if m2 < df - tol || (alpha > half + tol && alpha < crit - tol && sum < crit - tol) {
        Region::PI
    } else if sum > crit + tol && alpha > half + tol {
        Region::PII
    } else if m2 > df + tol && alpha < half - tol {
        Region::PIII
    } else {
        Region::Other
    };
    Ok(ComplexGamma { alpha, beta, region })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel(eta1: f64, eta2: f64) -> Kernel {
        KernelSpec { eta1, eta2, ..Default::default() }.build().unwrap()
    }

    #[test]
    fn kappa_profile_endpoints() {
        let k = kernel(0.0, 1.0);
        assert!((k.kappa(0.0) - 1.0).abs() < 1e-15);
        assert_eq!(k.kappa(1.0), 0.0);
        assert_eq!(k.kappa(3.0), 0.0);
        for i in 0..100 {
            let r = i as f64 / 100.0;
            assert!((0.0..=1.0).contains(&k.kappa(r)));
        }
    }

    #[test]
    fn tprime_examples() {
        let k = kernel(0.0, 2.0);
        assert_eq!(k.tprime(2.5).unwrap(), 2.5);
        let k = kernel(1.0, 1.0);
        assert_eq!(k.tprime(0.0).unwrap(), 0.0);
        // Bisection oracle on s + e^{−s} = 2.
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if m + (-m).exp() < 2.0 {
                lo = m
            } else {
                hi = m
            }
        }
        let tp = k.tprime(1.0).unwrap();
        assert!((tp - lo).abs() < 1e-11, "{tp} vs {lo}");
        assert!((tp - 1.8414).abs() < 1e-4);
        assert!(k.tprime(f64::NAN).is_err());
        assert!(k.tprime(-1.0).is_err());
    }

    #[test]
    fn q_t_examples() {
        let k = kernel(0.0, 1.0);
        assert!((k.q_t(3.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(k.q_t(0.3, 1.0).unwrap(), 0.0);
        let v = k.q_t(2f64.ln(), 0.25).unwrap();
        assert!((v - k.kappa(0.5)).abs() < 1e-12);
    }

    #[test]
    fn bar_k_diag_and_support() {
        let k = kernel(0.5, 1.0);
        assert!((k.bar_k_t(3.0, 0.0).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(k.bar_k_t(5.0, 1.0).unwrap(), 0.0);
        assert_eq!(k.bar_k_t(5.0, 1.7).unwrap(), 0.0);
    }

    #[test]
    fn k_full_diagonal_and_far_field() {
        let k = kernel(0.5, 1.0);
        assert_eq!(k.k_full(0.0).unwrap(), Extended::PosInfinity);
        assert_eq!(k.k_full(1.2).unwrap(), Extended::Finite(0.0));
        // K + log r → −𝔍 as r → 0.
        let r = 1e-7;
        let v = k.k_full(r).unwrap().finite().unwrap();
        assert!((v + r.ln() + k.j_const()).abs() < 1e-5, "{}", v + r.ln() + k.j_const());
    }

    #[test]
    fn j_const_bounds() {
        let k = kernel(1.0, 1.0);
        assert!(k.j_const() >= 1.0);
        let ind = KernelSpec { eta1: 0.0, kappa: KappaProfile::Indicator, ..Default::default() }
            .build()
            .unwrap();
        assert!(ind.j_const().abs() < 1e-12);
    }

    #[test]
    fn bar_ell_identity_and_sign() {
        let k = kernel(1.0, 1.0);
        assert!((k.bar_ell(1.0).unwrap() + k.j_const()).abs() < 1e-8);
        for z in [0.4, 0.9, 2.0, 7.5] {
            let v = k.bar_ell(z).unwrap();
            assert!((v - (1.0 / z).ln() + k.j_const()).abs() < 1e-7);
        }
        for z in [0.01, 0.1, 0.3] {
            assert!(k.bar_ell(z).unwrap() <= 0.0);
        }
    }

    #[test]
    fn table_matches_direct_quadrature() {
        let k = kernel(0.5, 1.0);
        let tab = k.kbar_table(Some(2.0)).unwrap();
        for r in [1e-6, 1e-3, 0.02, 0.1, 0.3, 0.77, 0.999] {
            let direct = k.bar_k_t(2.0, r).unwrap();
            assert!((tab.eval(r) - direct).abs() < 1e-7, "r={r}: {} vs {direct}", tab.eval(r));
        }
        let full = k.kbar_table(None).unwrap();
        for r in [1e-20, 1e-9, 1e-3, 0.4] {
            let direct = k.k_full(r).unwrap().finite().unwrap();
            assert!((full.eval(r) - direct).abs() < 1e-7, "r={r}: {} vs {direct}", full.eval(r));
        }
    }

    #[test]
    fn mollifier_has_unit_mass() {
        for d in 1..=2 {
            let m = Mollifier::standard(d, 0.1).unwrap();
            assert!((m.mass().unwrap() - 1.0).abs() < 1e-10);
            assert_eq!(m.theta(1.0), 0.0);
        }
        let m = Mollifier::standard(1, 0.1).unwrap();
        assert!((m.theta_hat(0.0).unwrap() - 1.0).abs() < 1e-8);
        assert!((m.theta_hat_eps(10.0).unwrap() - m.theta_hat(1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_gamma(2, 1.0, 0.0).unwrap().region, Region::PI);
        assert_eq!(classify_gamma(2, 1.5, 0.5).unwrap().region, Region::BoundaryOneTwo);
        assert_eq!(classify_gamma(2, 1.0, 1.0).unwrap().region, Region::TriplePoint);
        assert_eq!(classify_gamma(1, 2f64.sqrt(), 0.0).unwrap().region, Region::CriticalReal);
        assert_eq!(classify_gamma(1, 0.5f64.sqrt(), 1.2).unwrap().region, Region::BoundaryTwoThree);
        assert_eq!(classify_gamma(1, 2.0, 1.0).unwrap().region, Region::PII);
        assert_eq!(classify_gamma(1, 0.2, 1.5).unwrap().region, Region::PIII);
        // Arc α²+β² = d with α < √(d/2) separates I from III.
        let b = (1.0f64 - 0.09).sqrt();
        assert_eq!(classify_gamma(1, 0.3, b).unwrap().region, Region::Other);
        assert!(classify_gamma(1, -0.1, 0.0).is_err());
    }
}
