//! Deterministic renormalisations: v(ε,θ,γ), v(t,γ), φ(t), φ(t,ε), r(t).

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{ensure_finite, Error, Result};
use crate::kernel_core::{ell_theta, ComplexGamma, Kernel, Mollifier, Region};
use crate::quad::{fixed_gl, Quad};
use crate::radial::sphere_area;

/// Kernel, mollifier and γ with lazily computed constants.
#[derive(Debug)]
pub struct NormContext {
    pub kernel: Kernel,
    pub moll: Option<Mollifier>,
    pub gamma: ComplexGamma,
    pub sigma: f64,
    i_theta: OnceLock<std::result::Result<f64, String>>,
    j_bar: OnceLock<std::result::Result<f64, String>>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Constants {
    pub j: f64,
    pub sigma: f64,
    pub i_theta: Option<f64>,
    pub j_bar: Option<f64>,
}

impl NormContext {
    pub fn new(kernel: &Kernel, moll: Option<&Mollifier>, gamma: ComplexGamma) -> Result<Self> {
        if let Some(m) = moll {
            if m.d != kernel.d() {
                return Err(Error::Input("mollifier and kernel dimensions differ".into()));
            }
        }
        let gamma = ComplexGamma::new(kernel.d(), gamma.alpha, gamma.beta)?;
        Ok(NormContext {
            kernel: kernel.clone(),
            moll: moll.cloned(),
            gamma,
            sigma: sphere_area(kernel.d()),
            i_theta: OnceLock::new(),
            j_bar: OnceLock::new(),
        })
    }

    pub fn d(&self) -> f64 {
        self.kernel.d() as f64
    }

    fn g(&self) -> f64 {
        self.gamma.modulus2()
    }

    fn is_critical_modulus(&self) -> bool {
        (self.g() - self.d()).abs() <= 1e-12 * self.d()
    }

    /// I = ∫ e^{|γ|²ℓ_θ}.
    pub fn i_theta(&self) -> Result<f64> {
        let moll = self.moll.as_ref().ok_or_else(|| Error::Precondition("I needs a mollifier".into()))?;
        self.i_theta
            .get_or_init(|| ell_theta(moll, self.g()).map(|e| e.integral).map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| Error::numerical("I", e))
    }

    /// J̄ = ∫ e^{|γ|²ℓ̄}; exact tail beyond e^{−η₁/η₂} where ℓ̄ = log(1/|z|) − 𝔍.
    pub fn j_bar(&self) -> Result<f64> {
        self.j_bar
            .get_or_init(|| self.compute_j_bar().map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| Error::numerical("J̄", e))
    }

    fn compute_j_bar(&self) -> Result<f64> {
        let g = self.g();
        let d = self.d();
        if g <= d {
            return Err(Error::Domain(format!("∫e^{{|γ|²ℓ̄}} diverges for |γ|² = {g} ≤ d")));
        }
        let spec = self.kernel.spec();
        let rho0 = (-spec.eta1 / spec.eta2).exp();
        let j = self.kernel.j_const();
        let tail = (-g * j).exp() * rho0.powf(d - g) / (g - d);
        let mut err = None;
        let inner = Quad::with_tol(1e-9).abs(1e-14).integrate(
            |rho: f64| match self.kernel.bar_ell(rho) {
                Ok(l) => rho.powf(d - 1.0) * (g * l).exp(),
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            },
            0.0,
            rho0,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(self.sigma * (inner.value + tail))
    }

    pub fn constants(&self) -> Constants {
        Constants {
            j: self.kernel.j_const(),
            sigma: self.sigma,
            i_theta: if self.g() > self.d() && self.moll.is_some() { self.i_theta().ok() } else { None },
            j_bar: if self.g() > self.d() { self.j_bar().ok() } else { None },
        }
    }

    /// v(ε, θ, γ) for γ on 𝒫′_{II/III}.
    pub fn v_eps(&self, eps: f64) -> Result<f64> {
        ensure_finite("eps", eps)?;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Input(format!("ε must lie in (0,1), got {eps}")));
        }
        let log_inv = (1.0 / eps).ln();
        match self.gamma.region {
            Region::TriplePoint => Ok(self.sigma.sqrt() * (2.0 * log_inv / PI).powf(0.25)),
            Region::BoundaryTwoThree => {
                let i = self.i_theta()?;
                Ok((2.0 * PI * log_inv).powf(-0.25) * eps.powf((self.d() - self.g()) / 2.0) * i.sqrt())
            }
            r => Err(Error::Domain(format!("v(ε,θ,γ) is defined on the II/III boundary, γ is in {r:?}"))),
        }
    }

    /// v(t, γ) for |γ|² ≥ d.
    pub fn v_t(&self, t: f64) -> Result<f64> {
        ensure_finite("t", t)?;
        if t <= 0.0 {
            return Err(Error::Input(format!("t must be positive, got {t}")));
        }
        if self.is_critical_modulus() {
            return Ok(self.sigma.sqrt() * (2.0 * t / PI).powf(0.25));
        }
        if self.g() < self.d() {
            return Err(Error::Domain(format!("v(t,γ) needs |γ|² ≥ d, got {}", self.g())));
        }
        let g = self.g();
        Ok((g * self.kernel.j_const() / 2.0).exp()
            * (2.0 * PI * t).powf(-0.25)
            * ((g - self.d()) * t / 2.0).exp()
            * self.j_bar()?.sqrt())
    }

    fn prefactor(&self, tbar: f64) -> f64 {
        (2.0 / (PI * tbar.max(1.0))).sqrt() * (self.g() * self.kernel.j_const()).exp()
    }

    /// ∫ Q_t(0,z) e^{|γ|²K̄_t(0,z)} dz (φ(t) without its prefactor).
    pub fn phi_integral(&self, t: f64) -> Result<f64> {
        ensure_finite("t", t)?;
        if t < 0.0 {
            return Err(Error::Input(format!("t must be nonnegative, got {t}")));
        }
        let g = self.g();
        let d = self.d();
        let tp = self.kernel.tprime(t)?;
        let spec = *self.kernel.spec();
        let quad = Quad::with_tol(1e-10).abs(1e-14);
        let mut err = None;
        // z = e^{−t′}u; then K̄_t(0,z) = ∫₀^{t′}(1 − η₁e^{−η₂(t′−w)}) κ̃(e^{−w}u) dw.
        let inner = fixed_gl(
            |u: f64| {
                let kbar = match quad.integrate(
                    |w: f64| (1.0 - spec.eta1 * (-spec.eta2 * (tp - w)).exp()) * self.kernel.kappa((-w).exp() * u),
                    0.0,
                    tp,
                ) {
                    Ok(e) => e.value,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                };
                u.powf(d - 1.0) * self.kernel.kappa(u) * (g * kbar).exp()
            },
            0.0,
            1.0,
            6,
        );
        if let Some(e) = err {
            return Err(e);
        }
        Ok(self.sigma * (-d * tp).exp() * inner)
    }

    /// φ(t) = √(2/(π(t∨1))) e^{|γ|²𝔍} ∫ Q_t e^{|γ|²K̄_t}.
    pub fn phi_t(&self, t: f64) -> Result<f64> {
        Ok(self.prefactor(t) * self.phi_integral(t)?)
    }

    /// φ(t, ε) with mollified Q_{t,ε}, K̄_{t,ε} and t̄ = t ∧ log(1/ε).
    pub fn phi_t_eps(&self, t: f64, eps: f64) -> Result<f64> {
        ensure_finite("t", t)?;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Input(format!("ε must lie in (0,1), got {eps}")));
        }
        let moll = self.moll.as_ref().ok_or_else(|| Error::Precondition("φ(t,ε) needs a mollifier".into()))?.with_eps(eps)?;
        let g = self.g();
        let d = self.d();
        let qs = self.kernel.q_support(t)?;
        let reach = qs + 2.0 * eps;
        let knot = (qs - 2.0 * eps).abs();
        let mut err = None;
        let mut integrand = |rho: f64| match self.kernel.mollified_covariances(&moll, t, rho) {
            Ok(c) => rho.powf(d - 1.0) * c.q_t_eps * (g * c.kbar_t_eps).exp(),
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        };
        let total = fixed_gl(&mut integrand, 0.0, knot.min(reach), 2) + fixed_gl(&mut integrand, knot.min(reach), reach, 2);
        if let Some(e) = err {
            return Err(e);
        }
        let tbar = t.min((1.0 / eps).ln());
        Ok(self.prefactor(tbar) * self.sigma * total)
    }

    /// ∫₀ᵗ φ(s) ds, refined on [t − √t, t] where most of the mass sits.
    pub fn phi_integral_until(&self, t: f64) -> Result<f64> {
        let mut pts = vec![0.0];
        if t > 1.0 {
            pts.push(1.0);
        }
        let tail = t - t.sqrt();
        if tail > 1.0 {
            pts.push(tail);
            let near = t - 0.25 * t.sqrt();
            if near > tail {
                pts.push(near);
            }
        }
        pts.push(t);
        let mut err = None;
        let est = Quad::with_tol(1e-9).abs(1e-300).integrate_points(
            |s: f64| match self.phi_t(s) {
                Ok(v) => v,
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
        Ok(est.value)
    }

    /// |γ|² ∫₀ᵗ φ / (2 v(t,γ)²).
    pub fn replacement_ratio(&self, t: f64) -> Result<f64> {
        let v = self.v_t(t)?;
        Ok(self.g() * self.phi_integral_until(t)? / (2.0 * v * v))
    }

    /// |γ|² ∫₀^∞ φ(t,ε) dt / (2 v(ε,θ,γ)²).
    pub fn replacement_ratio_eps(&self, eps: f64) -> Result<f64> {
        let v = self.v_eps(eps)?;
        let le = (1.0 / eps).ln();
        // Beyond log(1/ε) the integrand decays like e^{−dt}.
        let upper = le + 30.0 / self.d();
        let mut err = None;
        let est = Quad::with_tol(1e-6).abs(1e-300).integrate_points(
            |s: f64| match self.phi_t_eps(s, eps) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            },
            &[0.0, 1.0_f64.min(le), le, le + 3.0, upper],
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(self.g() * est.value / (2.0 * v * v))
    }
}

/// r(t) = t − log log t.
pub fn r_of_t(t: f64) -> Result<f64> {
    ensure_finite("t", t)?;
    if t <= std::f64::consts::E {
        return Err(Error::Domain(format!("r(t) needs t > e, got {t}")));
    }
    Ok(t - t.ln().ln())
}

/// r(t, ε) = t̄ − log log t̄ with t̄ = t ∧ log(1/ε).
pub fn r_of_t_eps(t: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Input(format!("ε must lie in (0,1), got {eps}")));
    }
    r_of_t(t.min((1.0 / eps).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_core::KernelSpec;

    #[test]
    fn r_formulas() {
        let ee = std::f64::consts::E.powf(std::f64::consts::E);
        assert!((r_of_t(ee).unwrap() - (ee - 1.0)).abs() < 1e-12);
        assert!(r_of_t(std::f64::consts::E).is_err());
        let v = r_of_t_eps(10.0, (-5.0f64).exp()).unwrap();
        assert!((v - (5.0 - 5f64.ln().ln())).abs() < 1e-12);
    }

    #[test]
    fn triple_point_v_values() {
        let k = KernelSpec::default().build().unwrap();
        let ctx = NormContext::new(&k, None, ComplexGamma::triple_point(1)).unwrap();
        let v = ctx.v_eps((-4.0f64).exp()).unwrap();
        assert!((v - 2f64.sqrt() * (8.0 / PI).powf(0.25)).abs() < 1e-12);
        assert!((ctx.v_t(PI / 2.0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let k2 = KernelSpec::with_d(2).build().unwrap();
        let ctx2 = NormContext::new(&k2, None, ComplexGamma::triple_point(2)).unwrap();
        let v2 = ctx2.v_eps((-1.0f64).exp()).unwrap();
        assert!((v2 - (2.0 * PI).sqrt() * (2.0 / PI).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let k = KernelSpec::default().build().unwrap();
        let inside = NormContext::new(&k, None, ComplexGamma::new(1, 0.3, 0.2).unwrap()).unwrap();
        assert!(matches!(inside.v_eps(0.1), Err(Error::Domain(_))));
        assert!(matches!(inside.v_t(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn phi_integral_identity() {
        // d/dt e^{gK̄_t} = g Q_t e^{gK̄_t}, so g ∫₀ᵗ φ̄ = ∫ (e^{gK̄_t} − 1).
        let k = KernelSpec::default().build().unwrap();
        let ctx = NormContext::new(&k, None, ComplexGamma::new(1, 1.2, 0.4).unwrap()).unwrap();
        let g = ctx.gamma.modulus2();
        let t = 2.0;
        let lhs = g * Quad::with_tol(1e-10).integrate(|s| ctx.phi_integral(s).unwrap(), 0.0, t).unwrap().value;
        let rhs = 2.0 * Quad::with_tol(1e-10).integrate(|r| (g * k.bar_k_t(t, r).unwrap()).exp() - 1.0, 0.0, 1.0).unwrap().value;
        assert!((lhs - rhs).abs() < 1e-6 * rhs, "{lhs} vs {rhs}");
    }
}
