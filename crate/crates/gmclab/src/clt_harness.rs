//! Mixture-Gaussian limit checks for families of continuous martingales, via
//! empirical characteristic functions, plus the reference mixture sampler.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::field_sampler::{Channel, GridField, GridSpec, SpectralFamily};
use crate::gmc_measure::{chaos_sum, critical_factor, measure_eps, mollified_variance, project_omega, TestFunction};
use crate::kernel_core::{ComplexGamma, Kernel, Mollifier};
use crate::normalization::NormContext;
use crate::rng::StreamKey;
use crate::stats::{bootstrap_ci, MeanSe};

/// One replica of W_n at index k: raw (unscaled) quantities.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyDraw {
    pub w0: f64,
    /// ⟨W_n⟩ at the probe time, when available
    pub bracket_probe: Option<f64>,
    /// ⟨W_n⟩_∞, when available
    pub bracket_inf: Option<f64>,
    pub terminal: f64,
    /// mixture variable drawn jointly with the replica
    pub z: f64,
    /// values of the test functionals; entry 0 is H ≡ 1
    pub h: Vec<f64>,
}

pub trait MartingaleFamily: Sync {
    /// n (or ε) values, in the order the limit is approached
    fn indices(&self) -> &[f64];
    fn scale(&self, k: usize) -> Result<f64>;
    fn draw(&self, k: usize, key: StreamKey) -> Result<FamilyDraw>;
    fn name(&self) -> String;
}

/// Synthetic families with known answers. Each runs a Brownian motion on
/// the clock ⟨W⟩_t = v²Z(1 − e^{−t/(1+n)}), so the probe bracket vanishes as
/// n grows.
#[derive(Debug, Clone, Serialize)]
pub enum Synthetic {
    /// W = v√Z·N with Z log-normal; `truncate` stops the clock at v²A
    Mixture { log_sd: f64, truncate: Option<f64> },
    /// W = v·B_{z₀}
    Brownian { z0: f64 },
    /// starts at W₀ = v, violating the third hypothesis
    ShiftedStart { log_sd: f64 },
    /// W = c·v, deterministic
    Constant { c: f64 },
}

#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub kind: Synthetic,
    pub ns: Vec<f64>,
    /// probe time for ⟨W⟩_t
    pub t_probe: f64,
}

impl SyntheticFamily {
    pub fn new(kind: Synthetic, ns: Vec<f64>) -> Self {
        SyntheticFamily { kind, ns, t_probe: 0.1 }
    }
}

impl MartingaleFamily for SyntheticFamily {
    fn indices(&self) -> &[f64] {
        &self.ns
    }

    fn scale(&self, k: usize) -> Result<f64> {
        Ok(self.ns[k].sqrt().max(1.0))
    }

    fn draw(&self, k: usize, key: StreamKey) -> Result<FamilyDraw> {
        let v = self.scale(k)?;
        let n = self.ns[k];
        let g = key.normal_vec(0, 2);
        let frac = 1.0 - (-self.t_probe / (1.0 + n)).exp();
        let (w0, z, terminal, sat_z) = match self.kind {
            Synthetic::Mixture { log_sd, truncate } => {
                let z = (log_sd * g[0]).exp();
                let used = truncate.map_or(z, |a| z.min(a));
                (0.0, z, v * used.sqrt() * g[1], used)
            }
            Synthetic::Brownian { z0 } => (0.0, z0, v * z0.sqrt() * g[1], z0),
            Synthetic::ShiftedStart { log_sd } => {
                let z = (log_sd * g[0]).exp();
                (v, z, v + v * z.sqrt() * g[1], z)
            }
            Synthetic::Constant { c } => (c * v, 1.0, c * v, 0.0),
        };
        let probe = v * v * sat_z * frac;
        Ok(FamilyDraw {
            w0,
            bracket_probe: Some(probe),
            bracket_inf: Some(v * v * sat_z),
            terminal,
            z,
            h: vec![1.0, z.tanh()],
        })
    }

    fn name(&self) -> String {
        format!("synthetic/{:?}", self.kind)
    }
}

/// M^γ_ε(f, ω) at the triple point (or on the II/III boundary) with the
/// critical-measure proxy √(π log(1/ε)/2)·M^{√2d}_ε(e^{|γ|²L}|f|²) as Z.
pub struct GmcFamily {
    kernel: Kernel,
    ctx: Vec<NormContext>,
    eps: Vec<f64>,
    family: SpectralFamily,
    molls: Vec<Mollifier>,
    gamma: ComplexGamma,
    f: TestFunction,
    g_crit: TestFunction,
    omega: f64,
    vars: Vec<f64>,
}

impl GmcFamily {
    pub fn new(kernel: &Kernel, grid: GridSpec, gamma: ComplexGamma, eps: Vec<f64>, f: TestFunction, omega: f64) -> Result<Self> {
        if eps.is_empty() || eps.len() > 7 {
            return Err(Error::Input("need between 1 and 7 ε values".into()));
        }
        grid.check_padding(f.radius())?;
        let d = kernel.d();
        let molls: Vec<Mollifier> = eps.iter().map(|&e| Mollifier::standard(d, e)).collect::<Result<_>>()?;
        let mut channels: Vec<Channel> = molls.iter().map(|m| Channel { moll: Some(m.clone()), groups: None }).collect();
        // X₁ for the second test functional
        channels.push(Channel { moll: None, groups: Some(1) });
        let family = SpectralFamily::new(kernel, grid, &[1.0], channels)?;
        let ctx: Vec<NormContext> = molls.iter().map(|m| NormContext::new(kernel, Some(m), gamma)).collect::<Result<_>>()?;
        let vars = molls.iter().map(|m| mollified_variance(kernel, m, None)).collect::<Result<_>>()?;
        let lweight = (gamma.modulus2() * kernel.l_diag()).exp();
        let g_crit = f.modulus_squared().scaled(Complex64::new(lweight, 0.0));
        Ok(GmcFamily { kernel: kernel.clone(), ctx, eps, family, molls, gamma, f, g_crit, omega, vars })
    }

    /// All ε indices from one joint field draw.
    pub fn draw_all(&self, key: StreamKey) -> Result<Vec<FamilyDraw>> {
        let fields = self.family.sample(key);
        let coarse = &fields[fields.len() - 1];
        let h1 = coarse.at(&vec![0.0; coarse.grid.d]).tanh();
        let crit = ComplexGamma::critical_real(self.kernel.d());
        let g_sites = self.g_crit.on_grid(&coarse.grid);
        let mut out = Vec::with_capacity(self.eps.len());
        for (k, m) in self.molls.iter().enumerate() {
            let field = &fields[k];
            let s = measure_eps(field, &self.kernel, m, &self.gamma, &self.f)?;
            let w = project_omega(&s, self.omega);
            let zc = chaos_sum(field, &crit, &g_sites, self.vars[k], None)?.re;
            let z = critical_factor((1.0 / m.eps).ln()) * zc;
            out.push(FamilyDraw { w0: 0.0, bracket_probe: None, bracket_inf: None, terminal: w, z, h: vec![1.0, h1] });
        }
        Ok(out)
    }
}

impl MartingaleFamily for GmcFamily {
    fn indices(&self) -> &[f64] {
        &self.eps
    }

    fn scale(&self, k: usize) -> Result<f64> {
        self.ctx[k].v_eps(self.eps[k])
    }

    fn draw(&self, k: usize, key: StreamKey) -> Result<FamilyDraw> {
        Ok(self.draw_all(key)?.swap_remove(k))
    }

    fn name(&self) -> String {
        format!("gmc/gamma={}+{}i", self.gamma.alpha, self.gamma.beta)
    }
}

fn draws<F: MartingaleFamily + ?Sized>(fam: &F, k: usize, replicas: usize, key: StreamKey) -> Result<Vec<FamilyDraw>> {
    (0..replicas as u64).into_par_iter().map(|r| fam.draw(k, StreamKey { replica: r, ..key })).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisRow {
    pub index: f64,
    /// E|⟨W⟩_∞/v² − Z|
    pub total_gap: Option<MeanSe>,
    /// E[⟨W⟩_t/v²] at the probe time
    pub probe_ratio: Option<MeanSe>,
    /// E|W₀/v|
    pub start_ratio: MeanSe,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub family: String,
    pub rows: Vec<HypothesisRow>,
    pub total_ok: Option<bool>,
    pub probe_ok: Option<bool>,
    pub start_ok: bool,
}

/// The three hypotheses, tested as concentration at the last index.
pub fn hypothesis_check<F: MartingaleFamily + ?Sized>(fam: &F, tolerance: f64, replicas: usize, key: StreamKey) -> Result<HypothesisReport> {
    let mut rows = Vec::new();
    for (k, &idx) in fam.indices().iter().enumerate() {
        let v = fam.scale(k)?;
        let ds = draws(fam, k, replicas, key)?;
        let opt = |get: &dyn Fn(&FamilyDraw) -> Option<f64>| -> Option<MeanSe> {
            let xs: Option<Vec<f64>> = ds.iter().map(get).collect();
            xs.map(|x| MeanSe::of(&x))
        };
        rows.push(HypothesisRow {
            index: idx,
            total_gap: opt(&|d| d.bracket_inf.map(|b| (b / (v * v) - d.z).abs())),
            probe_ratio: opt(&|d| d.bracket_probe.map(|b| b / (v * v))),
            start_ratio: MeanSe::of(&ds.iter().map(|d| (d.w0 / v).abs()).collect::<Vec<_>>()),
        });
    }
    let last = rows.last().ok_or_else(|| Error::Input("family has no indices".into()))?;
    Ok(HypothesisReport {
        family: fam.name(),
        total_ok: last.total_gap.map(|m| m.mean <= tolerance),
        probe_ok: last.probe_ratio.map(|m| m.mean <= tolerance),
        start_ok: last.start_ratio.mean <= tolerance,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CfCell {
    pub xi: f64,
    pub h_index: usize,
    pub diff: [f64; 2],
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CfReport {
    pub index: f64,
    /// max over cells of |E[H e^{iξW/v}] − E[H e^{−ξ²Z/2}]|
    pub distance: f64,
    /// Bonferroni-corrected half width at the worst cell
    pub half_width: f64,
    pub consistent_with_zero: bool,
    pub bootstrap_ci: (f64, f64),
    /// largest empirical |E e^{iξW/v}|
    pub max_cf_modulus: f64,
    pub cells: Vec<CfCell>,
    pub warnings: Vec<String>,
}

pub const DEFAULT_XI: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Paired ECF comparison from precomputed draws.
pub fn cf_distance_from(draws: &[FamilyDraw], v: f64, index: f64, xi_grid: &[f64], level: f64, resolution: f64, key: StreamKey) -> Result<CfReport> {
    if draws.len() < 2 {
        return Err(Error::Input("cf distance needs at least two replicas".into()));
    }
    let nh = draws[0].h.len();
    let cells_n = xi_grid.len() * nh;
    let z_crit = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / (2.0 * 2.0 * cells_n as f64));
    let terms = |d: &FamilyDraw, xi: f64, hk: usize| -> (f64, f64) {
        let e = Complex64::from_polar(1.0, xi * d.terminal / v) - (-0.5 * xi * xi * d.z).exp();
        (d.h[hk] * e.re, d.h[hk] * e.im)
    };
    let mut cells = Vec::with_capacity(cells_n);
    let mut distance: f64 = 0.0;
    let mut half_width: f64 = 0.0;
    let mut consistent = true;
    let mut max_mod: f64 = 0.0;
    for &xi in xi_grid {
        let ecf: Vec<Complex64> = draws.iter().map(|d| Complex64::from_polar(1.0, xi * d.terminal / v)).collect();
        let m = ecf.iter().sum::<Complex64>() / ecf.len() as f64;
        max_mod = max_mod.max(m.norm());
        for hk in 0..nh {
            let (re, im): (Vec<f64>, Vec<f64>) = draws.iter().map(|d| terms(d, xi, hk)).unzip();
            let (mr, mi) = (MeanSe::of(&re), MeanSe::of(&im));
            let se = (mr.se_or_inf().powi(2) + mi.se_or_inf().powi(2)).sqrt();
            let norm = mr.mean.hypot(mi.mean);
            if norm > z_crit * se {
                consistent = false;
            }
            if norm > distance {
                distance = norm;
                half_width = z_crit * se;
            }
            cells.push(CfCell { xi, h_index: hk, diff: [mr.mean, mi.mean], se });
        }
    }
    let stat = |rows: &[&FamilyDraw]| -> f64 {
        let mut best: f64 = 0.0;
        for &xi in xi_grid {
            for hk in 0..nh {
                let (mut sr, mut si) = (0.0, 0.0);
                for d in rows {
                    let (a, b) = terms(d, xi, hk);
                    sr += a;
                    si += b;
                }
                best = best.max((sr / rows.len() as f64).hypot(si / rows.len() as f64));
            }
        }
        best
    };
    let ci = bootstrap_ci(draws, stat, 200, level, key.with_purpose(u64::MAX - 1));
    let mut warnings = Vec::new();
    if half_width > resolution {
        warnings.push(format!("CI half width {half_width:.3} exceeds the requested resolution {resolution}"));
    }
    Ok(CfReport { index, distance, half_width, consistent_with_zero: consistent, bootstrap_ci: ci, max_cf_modulus: max_mod, cells, warnings })
}

/// ECF distance at index k.
pub fn cf_distance<F: MartingaleFamily + ?Sized>(fam: &F, k: usize, xi_grid: &[f64], replicas: usize, key: StreamKey) -> Result<CfReport> {
    let ds = draws(fam, k, replicas, key)?;
    cf_distance_from(&ds, fam.scale(k)?, fam.indices()[k], xi_grid, 0.95, 0.1, key)
}

/// cf distances at every ε of a GMC family, one joint draw per replica.
pub fn gmc_cf_trend(fam: &GmcFamily, xi_grid: &[f64], replicas: usize, key: StreamKey) -> Result<Vec<CfReport>> {
    let all: Vec<Vec<FamilyDraw>> = (0..replicas as u64).into_par_iter().map(|r| fam.draw_all(StreamKey { replica: r, ..key })).collect::<Result<_>>()?;
    (0..fam.indices().len())
        .map(|k| {
            let ds: Vec<FamilyDraw> = all.iter().map(|row| row[k].clone()).collect();
            cf_distance_from(&ds, fam.scale(k)?, fam.indices()[k], xi_grid, 0.95, 0.1, key)
        })
        .collect()
}

/// Matrix with entries √(π log(1/ε)/2)·M^{√2d}_ε(e^{|γ|²L} f_i f̄_j) on one
/// mollified field.
pub fn mixture_matrix(field: &GridField, kernel: &Kernel, moll: &Mollifier, gamma: &ComplexGamma, fs: &[TestFunction]) -> Result<DMatrix<Complex64>> {
    let n = fs.len();
    let grid = field.grid;
    let var = mollified_variance(kernel, moll, None)?;
    let crit = ComplexGamma::critical_real(kernel.d());
    let lw = (gamma.modulus2() * kernel.l_diag()).exp();
    let factor = critical_factor((1.0 / moll.eps).ln());
    let vals: Vec<Vec<Complex64>> = fs.iter().map(|f| (0..grid.len()).map(|i| { let p = grid.point(i); f.eval(&p[..grid.d]) }).collect()).collect();
    let mut m = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for i in 0..n {
        for j in i..n {
            let sites: Vec<(usize, Complex64)> = (0..grid.len())
                .filter_map(|s| {
                    let v = vals[i][s] * vals[j][s].conj() * lw;
                    (v != Complex64::new(0.0, 0.0)).then_some((s, v))
                })
                .collect();
            let z = chaos_sum(field, &crit, &sites, var, None)? * factor;
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
        }
    }
    Ok(m)
}

/// Σξ with Σ the Hermitian PSD root of `z` and ξ standard complex Gaussian
/// (real and imaginary parts independent N(0,1)).
pub fn sample_mixture(z: &DMatrix<Complex64>, key: StreamKey) -> Result<Vec<Complex64>> {
    let n = z.nrows();
    if z.ncols() != n {
        return Err(Error::Input("mixture matrix must be square".into()));
    }
    let herm = (z + z.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut clipped = 0;
    let mut lam = eig.eigenvalues.clone();
    for l in lam.iter_mut() {
        if *l < -1e-8 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::numerical("mixture matrix", format!("eigenvalue {l:.3e} is not PSD within tolerance")));
        }
        if *l < 0.0 {
            clipped += 1;
            *l = 0.0;
        }
    }
    if clipped > 0 {
        log::info!("clipped {clipped} slightly negative eigenvalues");
    }
    let u = &eig.eigenvectors;
    let mut root = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for a in 0..n {
        for b in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..n {
                s += u[(a, k)] * lam[k].sqrt() * u[(b, k)].conj();
            }
            root[(a, b)] = s;
        }
    }
    let g = key.normal_vec(0, 2 * n);
    let xi: Vec<Complex64> = (0..n).map(|k| Complex64::new(g[2 * k], g[2 * k + 1])).collect();
    Ok((0..n).map(|a| (0..n).map(|b| root[(a, b)] * xi[b]).sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_family_ratios() {
        let fam = SyntheticFamily::new(Synthetic::Brownian { z0: 0.7 }, vec![4.0, 100.0]);
        let r = hypothesis_check(&fam, 0.01, 50, StreamKey::new(1, 0, 0)).unwrap();
        let last = r.rows.last().unwrap();
        assert!(last.total_gap.unwrap().mean < 1e-12);
        assert_eq!(last.start_ratio.mean, 0.0);
        assert_eq!(r.probe_ok, Some(true));
    }

    #[test]
    fn shifted_start_fails_third_check() {
        let fam = SyntheticFamily::new(Synthetic::ShiftedStart { log_sd: 0.3 }, vec![4.0, 100.0]);
        let r = hypothesis_check(&fam, 0.01, 50, StreamKey::new(1, 0, 0)).unwrap();
        assert!(!r.start_ok);
        assert!((r.rows[1].start_ratio.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_family_is_far() {
        let fam = SyntheticFamily::new(Synthetic::Constant { c: 1.0 }, vec![10.0]);
        let r = cf_distance(&fam, 0, &DEFAULT_XI, 200, StreamKey::new(3, 0, 0)).unwrap();
        assert!(!r.consistent_with_zero);
        assert!(r.distance > 0.3);
    }

    #[test]
    fn deterministic_mixture_moments() {
        let z = DMatrix::from_element(1, 1, Complex64::new(2.0, 0.0));
        let xs: Vec<Complex64> = (0..4000).map(|r| sample_mixture(&z, StreamKey::new(5, r, 0)).unwrap()[0]).collect();
        let re = MeanSe::of(&xs.iter().map(|c| c.re * c.re).collect::<Vec<_>>());
        let im = MeanSe::of(&xs.iter().map(|c| c.im * c.im).collect::<Vec<_>>());
        assert!(re.within(2.0, 4.0) && im.within(2.0, 4.0));
    }

    #[test]
    fn equal_functions_are_perfectly_correlated() {
        let z = DMatrix::from_element(2, 2, Complex64::new(1.5, 0.0));
        let s = sample_mixture(&z, StreamKey::new(2, 0, 0)).unwrap();
        assert!((s[0] - s[1]).norm() < 1e-12);
    }

    #[test]
    fn non_psd_rejected() {
        let mut z = DMatrix::from_element(2, 2, Complex64::new(0.0, 0.0));
        z[(0, 0)] = Complex64::new(1.0, 0.0);
        z[(1, 1)] = Complex64::new(-1.0, 0.0);
        assert!(sample_mixture(&z, StreamKey::new(0, 0, 0)).is_err());
    }
}
