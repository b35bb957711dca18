//! Quadratic-variation integrands A_t, B_t (and their mollified versions),
//! martingale brackets, barrier events and the restricted law-of-large-numbers
//! study.
//!
//! With z(x) = f(x)e^{γX(x) − γ²K(x)/2}, the integrands are the lattice pair sums
//! A = h^{2d} Σ z(x) z̄(y) W(x−y) and B = h^{2d} Σ z(x) z(y) W(x−y), where W is
//! Q_t (or Q_{t,ε}) sampled at the offset, or averaged over a pair of cells.

use std::collections::HashMap;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fft::{signed_index, unflatten, FftNd};
use crate::field_sampler::{GridField, GridSpec, LadderSample, ScaleLadder, ScaleMeta, SlabSampler};
use crate::gmc_measure::{measure_t, TestFunction};
use crate::kernel_core::{ComplexGamma, Kernel, Mollifier};
use crate::normalization::{r_of_t, NormContext};
use crate::quad::gauss_legendre;
use crate::rng::StreamKey;
use crate::stats::{KahanSum, MeanSe};

/// How the pair sum is organised. All three give the same value; the first two
/// agree bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    CellList,
    Exhaustive,
    Spectral,
}

/// Pair weight: Q at the lattice offset, or Q averaged over the two cells
/// with the field frozen per cell (bias O(h·Lip X)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellQuadrature {
    Point,
    Subcell,
}

/// Weights on the cube of absolute offsets [0, kmax]^d.
#[derive(Debug, Clone)]
struct WeightTable {
    d: usize,
    kmax: usize,
    vals: Vec<f64>,
}

impl WeightTable {
    /// `w` is called once per offset class (sorted absolute offsets, or
    /// squared length when `radial`).
    fn build(d: usize, kmax: usize, radial: bool, w: &(dyn Fn(&[i64]) -> Result<f64> + Sync)) -> Result<Self> {
        let side = kmax + 1;
        let len = side.pow(d as u32);
        let class = |idx: usize| -> [u64; 3] {
            let mut k = [0usize; 3];
            unflatten(idx, side, d, &mut k);
            if radial {
                [k.iter().map(|&v| (v * v) as u64).sum(), 0, 0]
            } else {
                let mut c = [k[0] as u64, k[1] as u64, k[2] as u64];
                c[..d].sort_unstable();
                c
            }
        };
        let mut reps: HashMap<[u64; 3], usize> = HashMap::new();
        for idx in 0..len {
            reps.entry(class(idx)).or_insert(idx);
        }
        let mut keys: Vec<([u64; 3], usize)> = reps.into_iter().collect();
        keys.sort_unstable();
        let values: Vec<f64> = keys
            .par_iter()
            .map(|&(_, idx)| {
                let mut k = [0usize; 3];
                unflatten(idx, side, d, &mut k);
                let delta: Vec<i64> = k[..d].iter().map(|&v| v as i64).collect();
                w(&delta)
            })
            .collect::<Result<_>>()?;
        let lookup: HashMap<[u64; 3], f64> = keys.iter().map(|k| k.0).zip(values).collect();
        let vals = (0..len).map(|idx| lookup[&class(idx)]).collect();
        Ok(WeightTable { d, kmax, vals })
    }

    fn get(&self, delta: &[i64]) -> f64 {
        let side = self.kmax + 1;
        let mut idx = 0;
        let mut stride = 1;
        for &v in &delta[..self.d] {
            let a = v.unsigned_abs() as usize;
            if a > self.kmax {
                return 0.0;
            }
            idx += a * stride;
            stride *= side;
        }
        self.vals[idx]
    }
}

/// Precomputed pair weights and pointwise variance for one scale.
#[derive(Debug, Clone)]
pub struct QvPlan {
    grid: GridSpec,
    /// support radius of the weight in x − y
    reach: f64,
    /// K(x,x) of the field the plan pairs with
    pub var: f64,
    pub quadrature: CellQuadrature,
    pub t: f64,
    pub eps: Option<f64>,
    table: WeightTable,
    symbol: std::sync::OnceLock<Vec<Complex64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QvValue {
    pub a: f64,
    pub b: [f64; 2],
    /// |Im| of the unsymmetrised A sum
    pub imag_residue: f64,
}

impl QvValue {
    pub fn b(&self) -> Complex64 {
        Complex64::new(self.b[0], self.b[1])
    }
}

/// ∫∫ Q over two cells of side h at offset hΔ, divided by h^{2d}.
fn subcell_weight(q: &dyn Fn(f64) -> f64, support: f64, h: f64, delta: &[i64], nodes: &[(f64, f64)]) -> f64 {
    let d = delta.len();
    // per axis: pieces of [hΔ−h, hΔ+h] ∩ [−s, s], split at the tent apex
    let mut axes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(d);
    for &k in delta {
        let c = h * k as f64;
        let mut pts = Vec::new();
        for (lo, hi) in [(c - h, c), (c, c + h)] {
            let (lo, hi) = (lo.max(-support), hi.min(support));
            if hi <= lo {
                continue;
            }
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for &(x, w) in nodes {
                let u = mid + half * x;
                pts.push((u, w * half * (h - (u - c).abs()).max(0.0)));
            }
        }
        if pts.is_empty() {
            return 0.0;
        }
        axes.push(pts);
    }
    let mut total = KahanSum::new();
    let mut idx = vec![0usize; d];
    loop {
        let mut r2 = 0.0;
        let mut w = 1.0;
        for a in 0..d {
            let (u, wa) = axes[a][idx[a]];
            r2 += u * u;
            w *= wa;
        }
        total.add(w * q(r2.sqrt()));
        let mut a = 0;
        loop {
            if a == d {
                return total.value() / h.powi(2 * d as i32);
            }
            idx[a] += 1;
            if idx[a] < axes[a].len() {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

impl QvPlan {
    /// Plan for A_t, B_t on fields X_t (including X₀).
    pub fn new(kernel: &Kernel, grid: GridSpec, t: f64, quadrature: CellQuadrature) -> Result<Self> {
        grid.validate()?;
        if grid.d != kernel.d() {
            return Err(Error::Input("grid and kernel dimensions differ".into()));
        }
        let support = kernel.q_support(t)?;
        let h = grid.h();
        let var = kernel.spec().k0.diag() + t;
        let q = |r: f64| kernel.q_t(t, r).unwrap_or(0.0);
        kernel.q_t(t, 0.0)?;
        let table = match quadrature {
            CellQuadrature::Point => {
                if h > 0.25 * support {
                    return Err(Error::Resolution(format!(
                        "Q_t support {support:.3e} spans fewer than four cells (h = {h:.3e}); use subcell quadrature"
                    )));
                }
                let kmax = (support / h).floor() as usize;
                WeightTable::build(grid.d, kmax, true, &|dl| {
                    let r = h * (dl.iter().map(|v| v * v).sum::<i64>() as f64).sqrt();
                    Ok(if r >= support { 0.0 } else { q(r) })
                })?
            }
            CellQuadrature::Subcell => {
                let nodes: Vec<(f64, f64)> = {
                    let (x, w) = gauss_legendre(12);
                    x.into_iter().zip(w).collect()
                };
                let kmax = (support / h).ceil() as usize + 1;
                WeightTable::build(grid.d, kmax, false, &|dl| Ok(subcell_weight(&q, support, h, dl, &nodes)))?
            }
        };
        let reach = match quadrature {
            CellQuadrature::Point => support,
            CellQuadrature::Subcell => support + h * (grid.d as f64).sqrt() * 1.0001,
        };
        Ok(QvPlan { grid, reach, var, quadrature, t, eps: None, table, symbol: Default::default() })
    }

    /// Plan for A_{t,ε}, B_{t,ε} on fields X_{t,ε}.
    pub fn new_eps(kernel: &Kernel, moll: &Mollifier, grid: GridSpec, t: f64) -> Result<Self> {
        grid.validate()?;
        let h = grid.h();
        let eps = moll.eps;
        if eps < h {
            return Err(Error::Resolution(format!("ε = {eps} is below the lattice spacing {h}")));
        }
        let support = kernel.q_support(t)? + 2.0 * eps;
        let var = kernel.mollified_covariances(moll, t, 0.0)?.k_t_eps;
        let kmax = (support / h).floor() as usize;
        let table = WeightTable::build(grid.d, kmax, true, &|dl| {
            let r = h * (dl.iter().map(|v| v * v).sum::<i64>() as f64).sqrt();
            if r >= support {
                return Ok(0.0);
            }
            kernel.mollified_covariances(moll, t, r).map(|c| c.q_t_eps.max(0.0))
        })?;
        Ok(QvPlan {
            grid,
            reach: support,
            var,
            quadrature: CellQuadrature::Point,
            t,
            eps: Some(eps),
            table,
            symbol: Default::default(),
        })
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    fn weight(&self, delta: &[i64]) -> f64 {
        self.table.get(delta)
    }

    /// Σ_Δ W(Δ) h^d, the lattice stand-in for ∫Q.
    pub fn weight_mass(&self) -> f64 {
        let kmax = (self.reach / self.grid.h()).ceil() as i64 + 1;
        let mut acc = KahanSum::new();
        let mut delta = vec![0i64; self.grid.d];
        enumerate_offsets(self.grid.d, kmax, &mut delta, 0, &mut |dl| acc.add(self.weight(dl)));
        acc.value() * self.grid.cell_volume()
    }

    fn site_offset(&self, i: usize, j: usize) -> [i64; 3] {
        let n = self.grid.n_per_side;
        let (mut a, mut b) = ([0usize; 3], [0usize; 3]);
        unflatten(i, n, self.grid.d, &mut a);
        unflatten(j, n, self.grid.d, &mut b);
        let mut out = [0i64; 3];
        for k in 0..self.grid.d {
            out[k] = a[k] as i64 - b[k] as i64;
        }
        out
    }

    fn spectral_symbol(&self) -> &[Complex64] {
        self.symbol.get_or_init(|| {
            let n = self.grid.n_per_side;
            let d = self.grid.d;
            let fft = FftNd::new(n, d);
            let mut buf: Vec<Complex64> = (0..self.grid.len())
                .map(|idx| {
                    let mut k = [0usize; 3];
                    unflatten(idx, n, d, &mut k);
                    let mut delta = [0i64; 3];
                    for a in 0..d {
                        delta[a] = signed_index(k[a], n);
                    }
                    Complex64::new(self.weight(&delta[..d]), 0.0)
                })
                .collect();
            fft.forward(&mut buf);
            buf
        })
    }

    fn check_field(&self, field: &GridField) -> Result<()> {
        if field.grid != self.grid {
            return Err(Error::Input("field grid differs from the plan grid".into()));
        }
        match (field.meta, self.eps) {
            (ScaleMeta::Martingale { t, .. }, None) if (t - self.t).abs() <= 1e-9 * t.max(1.0) => Ok(()),
            (ScaleMeta::Mollified { t: Some(t), eps }, Some(e))
                if (t - self.t).abs() <= 1e-9 * t.max(1.0) && (eps - e).abs() <= 1e-12 * e =>
            {
                Ok(())
            }
            (meta, _) => Err(Error::Precondition(format!("field {meta:?} does not match plan (t = {}, ε = {:?})", self.t, self.eps))),
        }
    }

    /// A and B for one field realisation.
    pub fn evaluate(&self, field: &GridField, gamma: &ComplexGamma, f: &[(usize, Complex64)], mode: PairMode) -> Result<QvValue> {
        self.check_field(field)?;
        let (z, log_scale) = site_weights(field, gamma, f, self.var)?;
        if z.is_empty() {
            return Ok(QvValue { a: 0.0, b: [0.0, 0.0], imag_residue: 0.0 });
        }
        let sites: Vec<usize> = f.iter().map(|&(i, _)| i).collect();
        let (ac, bc) = match mode {
            PairMode::Exhaustive => self.rows(&sites, &z, |_| (0..sites.len()).collect()),
            PairMode::CellList => {
                let cells = CellList::new(&self.grid, &sites, self.reach);
                self.rows(&sites, &z, |i| cells.neighbours(i))
            }
            PairMode::Spectral => self.spectral(&sites, &z),
        };
        let scale = (2.0 * log_scale).exp() * self.grid.cell_volume().powi(2);
        let a = ac * scale;
        let b = bc * scale;
        if !(a.re.is_finite() && b.re.is_finite() && b.im.is_finite()) {
            return Err(Error::numerical("pair sum", "non-finite result"));
        }
        let tol = 1e-10 * a.re.abs().max(f64::MIN_POSITIVE);
        if a.im.abs() > tol && mode != PairMode::Spectral {
            return Err(Error::numerical("A_t", format!("imaginary residue {:.3e} exceeds 1e-10·|A|", a.im)));
        }
        Ok(QvValue { a: a.re.max(0.0), b: [b.re, b.im], imag_residue: a.im.abs() })
    }

    fn rows<F>(&self, sites: &[usize], z: &[Complex64], candidates: F) -> (Complex64, Complex64)
    where
        F: Fn(usize) -> Vec<usize> + Sync,
    {
        let per_row: Vec<(Complex64, Complex64)> = (0..sites.len())
            .into_par_iter()
            .map(|i| {
                let mut sa = Complex64::new(0.0, 0.0);
                let mut sb = Complex64::new(0.0, 0.0);
                for j in candidates(i) {
                    let off = self.site_offset(sites[i], sites[j]);
                    let w = self.weight(&off[..self.grid.d]);
                    sa += z[j].conj() * w;
                    sb += z[j] * w;
                }
                (z[i] * sa, z[i] * sb)
            })
            .collect();
        reduce_pairs(&per_row)
    }

    fn spectral(&self, sites: &[usize], z: &[Complex64]) -> (Complex64, Complex64) {
        let n = self.grid.len();
        let fft = FftNd::new(self.grid.n_per_side, self.grid.d);
        let sym = self.spectral_symbol();
        let conv = |vals: Vec<Complex64>| {
            let mut buf = vals;
            fft.forward(&mut buf);
            for (b, s) in buf.iter_mut().zip(sym) {
                *b *= s;
            }
            fft.inverse(&mut buf);
            buf
        };
        let mut zc = vec![Complex64::new(0.0, 0.0); n];
        let mut zp = vec![Complex64::new(0.0, 0.0); n];
        for (&s, &v) in sites.iter().zip(z) {
            zc[s] = v.conj();
            zp[s] = v;
        }
        let cc = conv(zc);
        let cp = conv(zp);
        let per_row: Vec<(Complex64, Complex64)> =
            sites.iter().zip(z).map(|(&s, &v)| (v * cc[s] / n as f64, v * cp[s] / n as f64)).collect();
        reduce_pairs(&per_row)
    }
}

fn enumerate_offsets(d: usize, kmax: i64, delta: &mut Vec<i64>, axis: usize, f: &mut dyn FnMut(&[i64])) {
    if axis == d {
        f(delta);
        return;
    }
    for k in -kmax..=kmax {
        delta[axis] = k;
        enumerate_offsets(d, kmax, delta, axis + 1, f);
    }
}

fn reduce_pairs(rows: &[(Complex64, Complex64)]) -> (Complex64, Complex64) {
    let mut s = [KahanSum::new(), KahanSum::new(), KahanSum::new(), KahanSum::new()];
    for (a, b) in rows {
        s[0].add(a.re);
        s[1].add(a.im);
        s[2].add(b.re);
        s[3].add(b.im);
    }
    (Complex64::new(s[0].value(), s[1].value()), Complex64::new(s[2].value(), s[3].value()))
}

/// z(x) = f(x)e^{γX − γ²var/2 − c} with the common shift c returned.
fn site_weights(field: &GridField, gamma: &ComplexGamma, f: &[(usize, Complex64)], var: f64) -> Result<(Vec<Complex64>, f64)> {
    let g = gamma.as_complex();
    let shift = -0.5 * g * g * var;
    let c = f.iter().map(|&(i, _)| g.re * field.values[i] + shift.re).fold(f64::NEG_INFINITY, f64::max);
    if f.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    if !c.is_finite() {
        return Err(Error::numerical("site weights", "non-finite field values"));
    }
    if c > 340.0 {
        return Err(Error::numerical("site weights", format!("log-modulus {c:.1} would overflow the pair sum")));
    }
    let z = f
        .iter()
        .map(|&(i, fv)| {
            let x = field.values[i];
            fv * Complex64::from_polar((g.re * x + shift.re - c).exp(), g.im * x + shift.im)
        })
        .collect();
    Ok((z, c))
}

/// Buckets of side ≥ reach over the support sites.
struct CellList {
    d: usize,
    cells: HashMap<[i64; 3], Vec<usize>>,
    coords: Vec<[i64; 3]>,
}

impl CellList {
    fn new(grid: &GridSpec, sites: &[usize], reach: f64) -> Self {
        let side = reach.max(grid.h());
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut coords = Vec::with_capacity(sites.len());
        for (k, &s) in sites.iter().enumerate() {
            let p = grid.point(s);
            let mut c = [0i64; 3];
            for a in 0..grid.d {
                c[a] = ((p[a] + 0.5 * grid.box_size) / side).floor() as i64;
            }
            cells.entry(c).or_default().push(k);
            coords.push(c);
        }
        CellList { d: grid.d, cells, coords }
    }

    /// Candidate partners of site k, ascending.
    fn neighbours(&self, k: usize) -> Vec<usize> {
        let base = self.coords[k];
        let mut out = Vec::new();
        let mut delta = vec![0i64; self.d];
        enumerate_offsets(self.d, 1, &mut delta, 0, &mut |dl| {
            let mut c = base;
            for a in 0..dl.len() {
                c[a] += dl[a];
            }
            if let Some(v) = self.cells.get(&c) {
                out.extend_from_slice(v);
            }
        });
        out.sort_unstable();
        out
    }
}

/// A_t and B_t at the field's scale, with a plan built on the spot.
pub fn a_t(field: &GridField, kernel: &Kernel, gamma: &ComplexGamma, f: &TestFunction, t: f64, quadrature: CellQuadrature, mode: PairMode) -> Result<QvValue> {
    QvPlan::new(kernel, field.grid, t, quadrature)?.evaluate(field, gamma, &f.on_grid(&field.grid), mode)
}

/// A_{t,ε} and B_{t,ε}; the field must be X_{t,ε}.
pub fn a_t_eps(field: &GridField, kernel: &Kernel, moll: &Mollifier, gamma: &ComplexGamma, f: &TestFunction, t: f64, mode: PairMode) -> Result<QvValue> {
    QvPlan::new_eps(kernel, moll, field.grid, t)?.evaluate(field, gamma, &f.on_grid(&field.grid), mode)
}

/// ½(|γ|²A + Re(e^{−2iω}γ²B)), the integrand of ⟨M(f,ω)⟩.
pub fn omega_integrand(v: &QvValue, gamma: &ComplexGamma, omega: f64) -> f64 {
    let g = gamma.as_complex();
    0.5 * (gamma.modulus2() * v.a + (Complex64::from_polar(1.0, -2.0 * omega) * g * g * v.b()).re)
}

/// Pair sum of u(x)u(y)W with u = Re(e^{−iω}γz): the ω-integrand computed
/// without going through A and B.
pub fn omega_integrand_direct(plan: &QvPlan, field: &GridField, gamma: &ComplexGamma, f: &[(usize, Complex64)], omega: f64) -> Result<f64> {
    plan.check_field(field)?;
    let (z, c) = site_weights(field, gamma, f, plan.var)?;
    let rot = Complex64::from_polar(1.0, -omega) * gamma.as_complex();
    let u: Vec<f64> = z.iter().map(|v| (rot * v).re).collect();
    let sites: Vec<usize> = f.iter().map(|&(i, _)| i).collect();
    let mut acc = KahanSum::new();
    for i in 0..sites.len() {
        let mut row = 0.0;
        for j in 0..sites.len() {
            let off = plan.site_offset(sites[i], sites[j]);
            row += plan.weight(&off[..plan.grid.d]) * u[j];
        }
        acc.add(u[i] * row);
    }
    Ok(acc.value() * (2.0 * c).exp() * plan.grid.cell_volume().powi(2))
}

#[derive(Debug, Clone, Serialize)]
pub struct BarrierEvent {
    pub q: f64,
    pub radius: f64,
    /// sites inside B(0, R)
    pub sites: Vec<usize>,
    /// first ladder time with X̄ − √(2d)t ≥ q, per site
    pub passage: Vec<Option<f64>>,
    pub survived: bool,
}

/// First passages of X̄_{t_k}(x) − √(2d)t_k above q on the ladder, for sites
/// in B(0, R). X̄ excludes X₀; t = 0 counts (so q ≤ 0 fails at once).
pub fn barrier_scan(sample: &LadderSample, q: f64, radius: f64) -> Result<BarrierEvent> {
    let grid = sample.base.grid;
    let sites: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let p = grid.point(i);
            p[..grid.d].iter().map(|x| x * x).sum::<f64>().sqrt() <= radius
        })
        .collect();
    let paths: Vec<Vec<f64>> = sites
        .iter()
        .map(|&s| {
            let mut acc = 0.0;
            std::iter::once(0.0)
                .chain(sample.slabs.iter().map(|sl| {
                    acc += sl.values[s];
                    acc
                }))
                .collect()
        })
        .collect();
    let mut ev = barrier_scan_paths(&paths, sample.ladder.times(), grid.d, q)?;
    ev.radius = radius;
    ev.sites = sites;
    Ok(ev)
}

/// Same scan on explicit paths (paths[i][k] = X̄_{t_k}(x_i)).
pub fn barrier_scan_paths(paths: &[Vec<f64>], times: &[f64], d: usize, q: f64) -> Result<BarrierEvent> {
    let drift = (2.0 * d as f64).sqrt();
    let mut passage = Vec::with_capacity(paths.len());
    for p in paths {
        if p.len() != times.len() {
            return Err(Error::Input("path length differs from the ladder".into()));
        }
        passage.push(p.iter().zip(times).find(|(x, &t)| **x - drift * t >= q).map(|(_, &t)| t));
    }
    let survived = passage.iter().all(Option::is_none);
    Ok(BarrierEvent { q, radius: f64::NAN, sites: (0..paths.len()).collect(), passage, survived })
}

#[derive(Debug, Clone, Serialize)]
pub struct QvRecord {
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<[f64; 2]>,
    /// ⟨W⟩ at each ladder time
    pub w: Vec<f64>,
    /// ⟨W,W⟩ at each ladder time
    pub ww: Vec<[f64; 2]>,
    pub barrier: Option<BarrierEvent>,
    pub gamma: ComplexGamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Brackets {
    pub w: Vec<f64>,
    pub ww: Vec<Complex64>,
}

impl Brackets {
    /// ⟨M(f,ω)⟩ = ½(⟨W⟩ + Re(e^{−2iω}⟨W,W⟩)).
    pub fn m(&self, omega: f64) -> Vec<f64> {
        let rot = Complex64::from_polar(1.0, -2.0 * omega);
        self.w.iter().zip(&self.ww).map(|(w, ww)| 0.5 * (w + (rot * ww).re)).collect()
    }
}

/// ⟨W⟩_t = |γ|²∫A, ⟨W,W⟩_t = γ²∫B by the trapezoid rule on the ladder.
pub fn bracket_integrals(times: &[f64], a: &[f64], b: &[Complex64], gamma: &ComplexGamma) -> Result<Brackets> {
    if times.len() != a.len() || a.len() != b.len() || times.is_empty() {
        return Err(Error::Input("bracket inputs must have one value per ladder time".into()));
    }
    let g2 = gamma.as_complex() * gamma.as_complex();
    let m2 = gamma.modulus2();
    let mut w = vec![0.0];
    let mut ww = vec![Complex64::new(0.0, 0.0)];
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        w.push(w[k - 1] + m2 * 0.5 * dt * (a[k] + a[k - 1]));
        ww.push(ww[k - 1] + g2 * 0.5 * dt * (b[k] + b[k - 1]));
    }
    Ok(Brackets { w, ww })
}

/// Evaluates A, B at every ladder time of one replica and integrates.
pub fn qv_record(
    sample: &LadderSample,
    plans: &[QvPlan],
    gamma: &ComplexGamma,
    f: &[(usize, Complex64)],
    mode: PairMode,
    barrier: Option<(f64, f64)>,
) -> Result<QvRecord> {
    let fields = sample.cumulative();
    if plans.len() != fields.len() {
        return Err(Error::Input("need one plan per ladder time".into()));
    }
    let vals: Vec<QvValue> = fields.iter().zip(plans).map(|(x, p)| p.evaluate(x, gamma, f, mode)).collect::<Result<_>>()?;
    let times = sample.ladder.times().to_vec();
    let a: Vec<f64> = vals.iter().map(|v| v.a).collect();
    let b: Vec<Complex64> = vals.iter().map(QvValue::b).collect();
    let br = bracket_integrals(&times, &a, &b, gamma)?;
    let barrier = barrier.map(|(q, r)| barrier_scan(sample, q, r)).transpose()?;
    Ok(QvRecord {
        times,
        a,
        b: b.iter().map(|z| [z.re, z.im]).collect(),
        w: br.w,
        ww: br.ww.iter().map(|z| [z.re, z.im]).collect(),
        barrier,
        gamma: *gamma,
    })
}

/// Ã_t = φ(t)·√(πt/2)·M^{√(2d)}_r(e^{|γ|²L}|f|²) from a field X_r, r = r(t).
pub fn a_tilde(field_r: &GridField, ctx: &NormContext, f: &TestFunction, t: f64) -> Result<f64> {
    let r = r_of_t(t)?;
    match field_r.meta {
        ScaleMeta::Martingale { t: tr, .. } if (tr - r).abs() <= 1e-9 * r => {}
        other => return Err(Error::Precondition(format!("Ã_t needs X at r(t) = {r}, got {other:?}"))),
    }
    let weight = ctx.gamma.modulus2() * ctx.kernel.l_diag();
    let g = f.modulus_squared().scaled(Complex64::new(weight.exp(), 0.0));
    let crit = ComplexGamma::critical_real(ctx.kernel.d());
    let m = measure_t(field_r, &ctx.kernel, &crit, &g)?.value().re;
    Ok(ctx.phi_t(t)? * (std::f64::consts::PI * t / 2.0).sqrt() * m)
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct LawLargeNumbersConfig {
    pub t_list: Vec<f64>,
    pub q: f64,
    pub radius: f64,
    pub replicas: usize,
    pub n_per_side: usize,
    pub box_size: f64,
    pub dt: f64,
    pub f_radius: f64,
    pub seed: u64,
    pub mode: PairMode,
    pub quadrature: CellQuadrature,
}

#[derive(Debug, Clone, Serialize)]
pub struct LawLargeNumbersRow {
    pub t: f64,
    /// E[|⟨W⟩_t/(2v_t²) − proxy|; 𝒜]
    pub a_distance: MeanSe,
    /// E[|⟨W,W⟩_t|/(2v_t²); 𝒜]
    pub b_magnitude: MeanSe,
    /// unrestricted mean of ⟨W⟩_t/(2v_t²)
    pub a_ratio: MeanSe,
    pub proxy: MeanSe,
    pub survivors: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LawLargeNumbersReport {
    pub rows: Vec<LawLargeNumbersRow>,
    pub a_trend_decreasing: bool,
    pub b_below_a_baseline: bool,
    pub warnings: Vec<String>,
}

/// Shared state of a restricted law-of-large-numbers study.
pub struct LawLargeNumbersSetup {
    kernel: Kernel,
    gamma: ComplexGamma,
    cfg: LawLargeNumbersConfig,
    ladder: ScaleLadder,
    sampler: SlabSampler,
    plans: Vec<QvPlan>,
    f_sites: Vec<(usize, Complex64)>,
    g_fn: TestFunction,
    rs: Vec<f64>,
    v2: Vec<f64>,
    t_idx: Vec<usize>,
    r_idx: Vec<usize>,
}

/// One replica at one time of the study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LawLargeNumbersPoint {
    pub survived: bool,
    /// ⟨W⟩_t/(2v_t²)
    pub a_ratio: f64,
    /// |⟨W,W⟩_t|/(2v_t²)
    pub b_ratio: f64,
    /// √(πr/2)·M^{√(2d)}_r(e^{|γ|²L}|f|²)
    pub proxy: f64,
}

impl LawLargeNumbersSetup {
    pub fn new(kernel: &Kernel, gamma: &ComplexGamma, cfg: &LawLargeNumbersConfig) -> Result<Self> {
        let d = kernel.d();
        if cfg.t_list.is_empty() || cfg.replicas == 0 {
            return Err(Error::Input("need a nonempty t list and at least one replica".into()));
        }
        let grid = GridSpec::new(d, cfg.n_per_side, cfg.box_size)?;
        grid.check_padding(cfg.f_radius.max(cfg.radius))?;
        let t_max = cfg.t_list.iter().cloned().fold(0.0, f64::max);
        let rs: Vec<f64> = cfg.t_list.iter().map(|&t| r_of_t(t)).collect::<Result<_>>()?;
        let ladder = ScaleLadder::uniform(cfg.dt, t_max)?.with_extra(&[&cfg.t_list[..], &rs[..]].concat())?;
        let sampler = SlabSampler::new(kernel, grid)?;
        let plans: Vec<QvPlan> = ladder.times().iter().map(|&t| QvPlan::new(kernel, grid, t, cfg.quadrature)).collect::<Result<_>>()?;
        let ctx = NormContext::new(kernel, None, *gamma)?;
        let f = TestFunction::bump(cfg.f_radius)?;
        let f_sites = f.on_grid(&grid);
        let v2: Vec<f64> = cfg.t_list.iter().map(|&t| ctx.v_t(t).map(|v| v * v)).collect::<Result<_>>()?;
        let lweight = (gamma.modulus2() * kernel.l_diag()).exp();
        let g_fn = f.modulus_squared().scaled(Complex64::new(lweight, 0.0));
        let pos = |t: f64| ladder.position(t).ok_or_else(|| Error::numerical("ladder", format!("time {t} missing")));
        let t_idx: Vec<usize> = cfg.t_list.iter().map(|&t| pos(t)).collect::<Result<_>>()?;
        let r_idx: Vec<usize> = rs.iter().map(|&r| pos(r)).collect::<Result<_>>()?;
        Ok(LawLargeNumbersSetup {
            kernel: kernel.clone(),
            gamma: *gamma,
            cfg: cfg.clone(),
            ladder,
            sampler,
            plans,
            f_sites,
            g_fn,
            rs,
            v2,
            t_idx,
            r_idx,
        })
    }

    pub fn t_list(&self) -> &[f64] {
        &self.cfg.t_list
    }

    /// Replica `rep`, one point per entry of the t list.
    pub fn replica(&self, rep: u64) -> Result<Vec<LawLargeNumbersPoint>> {
        let cfg = &self.cfg;
        let key = StreamKey::new(cfg.seed, rep, 0);
        let sample = self.sampler.sample_ladder(&self.ladder, key)?;
        let rec = qv_record(&sample, &self.plans, &self.gamma, &self.f_sites, cfg.mode, None)?;
        let fields = sample.cumulative();
        let crit = ComplexGamma::critical_real(self.kernel.d());
        let mut out = Vec::with_capacity(cfg.t_list.len());
        for k in 0..cfg.t_list.len() {
            let truncated = truncate(&sample, self.t_idx[k]);
            let ev = barrier_scan(&truncated, cfg.q, cfg.radius)?;
            let m = measure_t(&fields[self.r_idx[k]], &self.kernel, &crit, &self.g_fn)?.value().re;
            let ww = rec.ww[self.t_idx[k]];
            out.push(LawLargeNumbersPoint {
                survived: ev.survived,
                a_ratio: rec.w[self.t_idx[k]] / (2.0 * self.v2[k]),
                b_ratio: Complex64::new(ww[0], ww[1]).norm() / (2.0 * self.v2[k]),
                proxy: (std::f64::consts::PI * self.rs[k] / 2.0).sqrt() * m,
            });
        }
        Ok(out)
    }

    /// Restricted distances and trends from per-replica points.
    pub fn summarize(&self, per_rep: &[Vec<LawLargeNumbersPoint>]) -> LawLargeNumbersReport {
        let replicas = per_rep.len();
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        for (k, &t) in self.cfg.t_list.iter().enumerate() {
            let col: Vec<&LawLargeNumbersPoint> = per_rep.iter().map(|r| &r[k]).collect();
            let mask = |p: &LawLargeNumbersPoint, x: f64| if p.survived { x } else { 0.0 };
            let dist: Vec<f64> = col.iter().map(|p| mask(p, (p.a_ratio - p.proxy).abs())).collect();
            let bmag: Vec<f64> = col.iter().map(|p| mask(p, p.b_ratio)).collect();
            let ratio: Vec<f64> = col.iter().map(|p| p.a_ratio).collect();
            let proxy: Vec<f64> = col.iter().map(|p| p.proxy).collect();
            let survivors = col.iter().filter(|p| p.survived).count();
            if survivors < 30.max(replicas / 10) {
                warnings.push(format!("t = {t}: {survivors} of {replicas} replicas stay below the barrier; restricted means have low power"));
            }
            rows.push(LawLargeNumbersRow {
                t,
                a_distance: MeanSe::of(&dist),
                b_magnitude: MeanSe::of(&bmag),
                a_ratio: MeanSe::of(&ratio),
                proxy: MeanSe::of(&proxy),
                survivors,
            });
        }
        let a_trend_decreasing = rows.windows(2).all(|w| w[1].a_distance.mean < w[0].a_distance.mean);
        let b_below_a_baseline = rows.last().map(|r| r.b_magnitude.mean).unwrap_or(f64::INFINITY) < rows[0].a_distance.mean;
        for w in &warnings {
            log::warn!("{w}");
        }
        LawLargeNumbersReport { rows, a_trend_decreasing, b_below_a_baseline, warnings }
    }
}

/// Per replica: ⟨W⟩_t/(2v_t²) against √(πr/2)M^{√(2d)}_r(e^{|γ|²L}|f|²),
/// both restricted to 𝒜_{q,R}, over `t_list`.
pub fn lawlarnum_test(kernel: &Kernel, gamma: &ComplexGamma, cfg: &LawLargeNumbersConfig) -> Result<LawLargeNumbersReport> {
    let setup = LawLargeNumbersSetup::new(kernel, gamma, cfg)?;
    let per_rep: Vec<Vec<LawLargeNumbersPoint>> = (0..cfg.replicas as u64).into_par_iter().map(|rep| setup.replica(rep)).collect::<Result<_>>()?;
    Ok(setup.summarize(&per_rep))
}

fn truncate(sample: &LadderSample, upto: usize) -> LadderSample {
    let times = sample.ladder.times()[..=upto].to_vec();
    LadderSample {
        ladder: ScaleLadder::new(times).expect("prefix of a valid ladder"),
        base: sample.base.clone(),
        slabs: sample.slabs[..upto].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_core::KernelSpec;

    fn setup(n: usize) -> (Kernel, GridSpec) {
        (KernelSpec::default().build().unwrap(), GridSpec::new(1, n, 4.0).unwrap())
    }

    #[test]
    fn zero_test_function_gives_zero() {
        let (k, grid) = setup(256);
        let field = GridField::zeros(grid, ScaleMeta::Martingale { t: 1.0, with_base: true }, "0");
        let plan = QvPlan::new(&k, grid, 1.0, CellQuadrature::Point).unwrap();
        let v = plan.evaluate(&field, &ComplexGamma::triple_point(1), &[], PairMode::CellList).unwrap();
        assert_eq!(v.a, 0.0);
        assert_eq!(v.b, [0.0, 0.0]);
    }

    #[test]
    fn real_gamma_real_f_gives_b_equal_a() {
        let (k, grid) = setup(512);
        let mut field = GridField::zeros(grid, ScaleMeta::Martingale { t: 0.5, with_base: true }, "0");
        for (i, v) in field.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let f = TestFunction::bump(0.5).unwrap();
        let g = ComplexGamma::new(1, 1.0, 0.0).unwrap();
        let v = a_t(&field, &k, &g, &f, 0.5, CellQuadrature::Point, PairMode::CellList).unwrap();
        assert!((v.b[0] - v.a).abs() < 1e-12 * v.a);
        assert!(v.b[1].abs() < 1e-12 * v.a);
    }

    #[test]
    fn resolution_guard() {
        let (k, grid) = setup(64);
        assert!(matches!(QvPlan::new(&k, grid, 3.0, CellQuadrature::Point), Err(Error::Resolution(_))));
        assert!(QvPlan::new(&k, grid, 3.0, CellQuadrature::Subcell).is_ok());
    }

    #[test]
    fn subcell_mass_matches_point_mass() {
        let (k, grid) = setup(1024);
        let point = QvPlan::new(&k, grid, 1.0, CellQuadrature::Point).unwrap();
        let sub = QvPlan::new(&k, grid, 1.0, CellQuadrature::Subcell).unwrap();
        let exact = 2.0 * crate::quad::Quad::with_tol(1e-12).integrate(|r| k.q_t(1.0, r).unwrap(), 0.0, 1.0).unwrap().value;
        assert!((point.weight_mass() - exact).abs() < 1e-6 * exact);
        assert!((sub.weight_mass() - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn brackets_trapezoid() {
        let g = ComplexGamma::triple_point(1);
        let times = [0.0, 1.0, 3.0];
        let br = bracket_integrals(&times, &[1.0, 1.0, 2.0], &[Complex64::new(0.0, 0.0); 3], &g).unwrap();
        assert!((br.w[2] - g.modulus2() * 4.0).abs() < 1e-15);
        let m = br.m(0.3);
        assert!((m[2] - 0.5 * br.w[2]).abs() < 1e-15);
    }

    #[test]
    fn barrier_passage_and_monotonicity() {
        let paths = vec![vec![0.0, 2.0, 1.0], vec![0.0, 0.5, 0.7]];
        let times = [0.0, 0.5, 1.0];
        let ev = barrier_scan_paths(&paths, &times, 1, 0.5).unwrap();
        assert_eq!(ev.passage, vec![Some(0.5), None]);
        assert!(!ev.survived);
        assert!(barrier_scan_paths(&paths, &times, 1, 2.0).unwrap().survived);
        assert!(!barrier_scan_paths(&paths, &times, 1, -1.0).unwrap().survived);
    }
}
