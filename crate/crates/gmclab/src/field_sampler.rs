//! Stationary Gaussian fields on periodic lattices.
//!
//! Slab increments X̄_{t_high} − X̄_{t_low} have compactly supported covariance
//! (radius ≤ 1), so on a torus of side ≥ 2 the circulant embedding of the
//! lattice covariance is exact and its eigenvalues are nonnegative up to
//! quadrature error.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::fft::{signed_index, unflatten, FftNd};
use crate::gaussian_tools::psd_sqrt;
use crate::kernel_core::{Kernel, Mollifier};
use crate::rng::StreamKey;

pub const STAGE_BASE: u32 = 1;
pub const STAGE_SLAB: u32 = 2;
pub const STAGE_FAMILY: u32 = 3;
pub const STAGE_PATHS: u32 = 4;

/// Eigenvalues below −EMBED_TOL·max are rejected, others are clipped to zero.
const EMBED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub n_per_side: usize,
    pub box_size: f64,
}

impl GridSpec {
    pub fn new(d: usize, n_per_side: usize, box_size: f64) -> Result<Self> {
        let g = GridSpec { d, n_per_side, box_size };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        crate::radial::check_dim(self.d)?;
        if !self.n_per_side.is_power_of_two() || self.n_per_side < 2 {
            return Err(Error::Input(format!("n_per_side must be a power of two ≥ 2, got {}", self.n_per_side)));
        }
        ensure_finite("box_size", self.box_size)?;
        if self.box_size < 2.0 {
            return Err(Error::Input(format!(
                "box side {} is below 2; the unit-range kernel would wrap around the torus",
                self.box_size
            )));
        }
        let total = (self.n_per_side as f64).powi(self.d as i32);
        if total > (1u64 << 26) as f64 {
            return Err(Error::Size(format!("{total} lattice sites exceed the 2^26 limit")));
        }
        Ok(())
    }

    /// Checks the padding rule side ≥ 2·(support diameter of f) + 2.
    pub fn check_padding(&self, f_radius: f64) -> Result<()> {
        if self.box_size < 4.0 * f_radius + 2.0 {
            return Err(Error::Input(format!(
                "box side {} too small for a test function of radius {f_radius} (need ≥ {})",
                self.box_size,
                4.0 * f_radius + 2.0
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.box_size / self.n_per_side as f64
    }

    pub fn len(&self) -> usize {
        self.n_per_side.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    /// Coordinates of lattice site `idx`: x_a = (k_a − n/2)·h, so the origin is a site.
    pub fn point(&self, idx: usize) -> [f64; 3] {
        let mut k = [0usize; 3];
        unflatten(idx, self.n_per_side, self.d, &mut k);
        let half = (self.n_per_side / 2) as f64;
        let h = self.h();
        let mut x = [0.0; 3];
        for a in 0..self.d {
            x[a] = (k[a] as f64 - half) * h;
        }
        x
    }

    /// Flat index of the site nearest to `x` (coordinates wrap periodically).
    pub fn index_of(&self, x: &[f64]) -> usize {
        let n = self.n_per_side as i64;
        let half = n / 2;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for &xa in x.iter().take(self.d) {
            let k = ((xa / self.h()).round() as i64 + half).rem_euclid(n);
            idx += k as usize * stride;
            stride *= self.n_per_side;
        }
        idx
    }

    /// |x_i − x_j| with minimal-image wrapping.
    pub fn torus_dist(&self, i: usize, j: usize) -> f64 {
        let n = self.n_per_side;
        let (mut a, mut b) = ([0usize; 3], [0usize; 3]);
        unflatten(i, n, self.d, &mut a);
        unflatten(j, n, self.d, &mut b);
        let mut s = 0.0;
        for k in 0..self.d {
            let off = signed_index((a[k] + n - b[k]) % n, n) as f64 * self.h();
            s += off * off;
        }
        s.sqrt()
    }

    /// Physical frequency vector of DFT index `idx` and its modulus.
    fn frequency(&self, idx: usize) -> ([f64; 3], f64) {
        let mut k = [0usize; 3];
        unflatten(idx, self.n_per_side, self.d, &mut k);
        let mut xi = [0.0; 3];
        let mut s = 0.0;
        for a in 0..self.d {
            xi[a] = 2.0 * PI * signed_index(k[a], self.n_per_side) as f64 / self.box_size;
            s += xi[a] * xi[a];
        }
        (xi, s.sqrt())
    }

    /// Radius |k|h of the minimal-image lattice offset with flat index `idx`.
    fn offset_radius_sq(&self, idx: usize) -> i64 {
        let mut k = [0usize; 3];
        unflatten(idx, self.n_per_side, self.d, &mut k);
        (0..self.d)
            .map(|a| {
                let s = signed_index(k[a], self.n_per_side);
                s * s
            })
            .sum()
    }
}

/// Which approximation a field represents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScaleMeta {
    /// X₀ (covariance K₀)
    Base,
    /// X̄_{t_high} − X̄_{t_low}
    Slab { t_low: f64, t_high: f64 },
    /// X_t = X₀ + X̄_t (base included) or X̄_t alone
    Martingale { t: f64, with_base: bool },
    /// θ_ε * X_t, or θ_ε * X when `t` is None
    Mollified { t: Option<f64>, eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub meta: ScaleMeta,
    pub seed_path: String,
}

#[derive(Serialize)]
struct RawSidecar<'a> {
    format: &'static str,
    d: usize,
    shape: Vec<usize>,
    box_size: f64,
    spacing: f64,
    scale_meta: &'a ScaleMeta,
    seed_path: &'a str,
}

impl GridField {
    pub fn zeros(grid: GridSpec, meta: ScaleMeta, seed_path: impl Into<String>) -> Self {
        GridField { grid, values: vec![0.0; grid.len()], meta, seed_path: seed_path.into() }
    }

    pub fn at(&self, x: &[f64]) -> f64 {
        self.values[self.grid.index_of(x)]
    }

    /// Writes the values as little-endian f64 plus a JSON sidecar `<path>.json`.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let side = RawSidecar {
            format: "f64-le",
            d: self.grid.d,
            shape: vec![self.grid.n_per_side; self.grid.d],
            box_size: self.grid.box_size,
            spacing: self.grid.h(),
            scale_meta: &self.meta,
            seed_path: &self.seed_path,
        };
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        std::fs::write(name, serde_json::to_string_pretty(&side).map_err(|e| Error::Config(e.to_string()))?)?;
        Ok(())
    }
}

/// Breakpoints 0 = t₀ < t₁ < ... < t_m of the scale discretisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadder {
    breakpoints: Vec<f64>,
}

impl ScaleLadder {
    pub fn new(mut breakpoints: Vec<f64>) -> Result<Self> {
        if breakpoints.first() != Some(&0.0) {
            breakpoints.insert(0, 0.0);
        }
        for w in breakpoints.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::Input(format!("ladder breakpoints must increase strictly, got {} then {}", w[0], w[1])));
            }
        }
        if breakpoints.len() < 2 {
            return Err(Error::Input("ladder needs at least one slab".into()));
        }
        Ok(ScaleLadder { breakpoints })
    }

    /// Uniform slabs of width `dt` up to `t_max` (the last slab may be shorter).
    pub fn uniform(dt: f64, t_max: f64) -> Result<Self> {
        if !(dt > 0.0 && t_max > 0.0 && dt.is_finite() && t_max.is_finite()) {
            return Err(Error::Input("ladder needs positive dt and t_max".into()));
        }
        let m = (t_max / dt - 1e-9).ceil() as usize;
        let mut b: Vec<f64> = (0..m).map(|k| k as f64 * dt).collect();
        b.push(t_max);
        Self::new(b)
    }

    /// Adds extra breakpoints (e.g. r(t) for each t of interest).
    pub fn with_extra(&self, extra: &[f64]) -> Result<Self> {
        let mut b = self.breakpoints.clone();
        for &e in extra {
            if e > 0.0 && e < self.t_max() && !b.iter().any(|&x| (x - e).abs() < 1e-12) {
                b.push(e);
            }
        }
        b.sort_by(|a, c| a.total_cmp(c));
        Self::new(b)
    }

    pub fn times(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn t_max(&self) -> f64 {
        *self.breakpoints.last().expect("ladder is nonempty")
    }

    pub fn slabs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.breakpoints.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn len(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the breakpoint equal to `t` (within 1e-12).
    pub fn position(&self, t: f64) -> Option<usize> {
        self.breakpoints.iter().position(|&b| (b - t).abs() <= 1e-12 * (1.0 + t))
    }
}

/// Table-route sampler: exact lattice covariance tables, circulant embedding.
#[derive(Debug, Clone)]
pub struct SlabSampler {
    kernel: Kernel,
    grid: GridSpec,
    fft: FftNd,
    /// √(λ/N) per slab
    amps: Arc<RwLock<HashMap<(u64, u64), Arc<Vec<f64>>>>>,
    base_amp: Arc<RwLock<Option<Arc<Vec<f64>>>>>,
}

impl SlabSampler {
    pub fn new(kernel: &Kernel, grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        if grid.d != kernel.d() {
            return Err(Error::Input(format!("grid dimension {} differs from kernel dimension {}", grid.d, kernel.d())));
        }
        Ok(SlabSampler {
            kernel: kernel.clone(),
            grid,
            fft: FftNd::new(grid.n_per_side, grid.d),
            amps: Arc::new(RwLock::new(HashMap::new())),
            base_amp: Arc::new(RwLock::new(None)),
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn fft(&self) -> &FftNd {
        &self.fft
    }

    /// Lattice eigenvalues of the slab covariance K̄_{t_high} − K̄_{t_low}.
    pub fn slab_eigenvalues(&self, t_low: f64, t_high: f64) -> Result<Vec<f64>> {
        let g = self.grid;
        let h = g.h();
        let mut cache: HashMap<i64, f64> = HashMap::new();
        let mut buf = Vec::with_capacity(g.len());
        for idx in 0..g.len() {
            let r2 = g.offset_radius_sq(idx);
            let v = match cache.get(&r2) {
                Some(v) => *v,
                None => {
                    let v = self.kernel.slab_cov(t_low, t_high, (r2 as f64).sqrt() * h)?;
                    cache.insert(r2, v);
                    v
                }
            };
            buf.push(Complex64::new(v, 0.0));
        }
        self.fft.forward(&mut buf);
        Ok(buf.iter().map(|c| c.re).collect())
    }

    fn amplitudes_from(&self, lambda: Vec<f64>, what: &str) -> Result<Vec<f64>> {
        let max = lambda.iter().cloned().fold(0.0f64, f64::max);
        let min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -EMBED_TOL * max {
            return Err(Error::Embedding(format!(
                "{what}: eigenvalue {min:.3e} below −{EMBED_TOL:.0e}·{max:.3e}; enlarge the box"
            )));
        }
        if min < -1e-10 * max {
            log::warn!("{what}: clipped negative eigenvalues down to {min:.3e} (max {max:.3e})");
        }
        let n = lambda.len() as f64;
        Ok(lambda.into_iter().map(|l| (l.max(0.0) / n).sqrt()).collect())
    }

    fn slab_amplitudes(&self, t_low: f64, t_high: f64) -> Result<Arc<Vec<f64>>> {
        let key = (t_low.to_bits(), t_high.to_bits());
        if let Some(a) = self.amps.read().expect("amplitude cache poisoned").get(&key) {
            return Ok(a.clone());
        }
        let lambda = self.slab_eigenvalues(t_low, t_high)?;
        let amp = Arc::new(self.amplitudes_from(lambda, &format!("slab [{t_low}, {t_high}]"))?);
        self.amps.write().expect("amplitude cache poisoned").insert(key, amp.clone());
        Ok(amp)
    }

    fn synthesize(&self, amp: &[f64], key: StreamKey) -> Vec<f64> {
        let n = amp.len();
        let z = key.normal_vec(0, 2 * n);
        let mut buf: Vec<Complex64> = amp
            .iter()
            .enumerate()
            .map(|(m, &a)| Complex64::new(a * z[2 * m], a * z[2 * m + 1]))
            .collect();
        self.fft.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Stationary field with covariance K̄_{t_high} − K̄_{t_low}.
    pub fn sample_slab(&self, t_low: f64, t_high: f64, key: StreamKey) -> Result<GridField> {
        ensure_finite("t_low", t_low)?;
        ensure_finite("t_high", t_high)?;
        if !(t_low >= 0.0 && t_high > t_low) {
            return Err(Error::Input(format!("slab needs 0 ≤ t_low < t_high, got [{t_low}, {t_high}]")));
        }
        let amp = self.slab_amplitudes(t_low, t_high)?;
        Ok(GridField {
            grid: self.grid,
            values: self.synthesize(&amp, key),
            meta: ScaleMeta::Slab { t_low, t_high },
            seed_path: key.path(),
        })
    }

    /// X₀ with covariance K₀ (periodised spectral synthesis; exact up to the
    /// wrap-around term K₀(L − r)).
    pub fn sample_x0(&self, key: StreamKey) -> Result<GridField> {
        let k0 = self.kernel.spec().k0;
        if k0.is_zero() {
            return Ok(GridField::zeros(self.grid, ScaleMeta::Base, key.path()));
        }
        let cached = self.base_amp.read().expect("amplitude cache poisoned").clone();
        let amp = match cached {
            Some(a) => a,
            None => {
                let g = self.grid;
                let h = g.h();
                let d = g.d;
                let alias = 2.0 * PI / h;
                let span = (k0.spectral_support() / alias).ceil() as i64 + 1;
                let mut lambda = Vec::with_capacity(g.len());
                for idx in 0..g.len() {
                    let (xi, _) = g.frequency(idx);
                    lambda.push(alias_sum(d, &xi, alias, span, |k| Ok(k0.spectral(d, k)))? / h.powi(d as i32));
                }
                let a = Arc::new(self.amplitudes_from(lambda, "base kernel")?);
                *self.base_amp.write().expect("amplitude cache poisoned") = Some(a.clone());
                a
            }
        };
        Ok(GridField {
            grid: self.grid,
            values: self.synthesize(&amp, key),
            meta: ScaleMeta::Base,
            seed_path: key.path(),
        })
    }

    /// All slab increments of a ladder plus X₀ for one replica; slab `k`
    /// uses the stream purpose (STAGE_SLAB, k).
    pub fn sample_ladder(&self, ladder: &ScaleLadder, key: StreamKey) -> Result<LadderSample> {
        let base = self.sample_x0(key.with_purpose(StreamKey::purpose_of(STAGE_BASE, 0)))?;
        let slabs = ladder
            .slabs()
            .enumerate()
            .map(|(k, (lo, hi))| self.sample_slab(lo, hi, key.with_purpose(StreamKey::purpose_of(STAGE_SLAB, k as u32))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LadderSample { ladder: ladder.clone(), base, slabs })
    }
}

fn alias_sum<F: FnMut(f64) -> Result<f64>>(d: usize, xi: &[f64; 3], alias: f64, span: i64, mut f: F) -> Result<f64> {
    let mut total = 0.0;
    let range = |a: usize| if a < d { -span..=span } else { 0..=0 };
    for j0 in range(0) {
        for j1 in range(1) {
            for j2 in range(2) {
                let js = [j0, j1, j2];
                let mut s = 0.0;
                for a in 0..d {
                    let v = xi[a] + alias * js[a] as f64;
                    s += v * v;
                }
                total += f(s.sqrt())?;
            }
        }
    }
    Ok(total)
}

/// Independent slab increments of one replica.
#[derive(Debug, Clone)]
pub struct LadderSample {
    pub ladder: ScaleLadder,
    pub base: GridField,
    pub slabs: Vec<GridField>,
}

impl LadderSample {
    /// X_{t_k} = X₀ + Σ_{j<k} slab_j for every breakpoint, in order.
    pub fn cumulative(&self) -> Vec<GridField> {
        let mut acc = self.base.values.clone();
        let key = &self.base.seed_path;
        let mut out = vec![GridField {
            grid: self.base.grid,
            values: acc.clone(),
            meta: ScaleMeta::Martingale { t: 0.0, with_base: true },
            seed_path: key.clone(),
        }];
        for (slab, &t) in self.slabs.iter().zip(&self.ladder.times()[1..]) {
            for (a, v) in acc.iter_mut().zip(&slab.values) {
                *a += v;
            }
            out.push(GridField {
                grid: self.base.grid,
                values: acc.clone(),
                meta: ScaleMeta::Martingale { t, with_base: true },
                seed_path: key.clone(),
            });
        }
        out
    }

    /// X_t at the top of the ladder.
    pub fn top(&self) -> Result<GridField> {
        let mut parts = vec![self.base.clone()];
        parts.extend(self.slabs.iter().cloned());
        assemble_xt(&parts)
    }
}

/// Sums X₀ and contiguous slabs starting at 0 into X_t.
pub fn assemble_xt(fields: &[GridField]) -> Result<GridField> {
    let first = fields.first().ok_or_else(|| Error::Input("nothing to assemble".into()))?;
    let grid = first.grid;
    let mut with_base = false;
    let mut slabs: Vec<(f64, f64)> = Vec::new();
    for f in fields {
        if f.grid != grid {
            return Err(Error::Input("fields live on different grids".into()));
        }
        match f.meta {
            ScaleMeta::Base => {
                if with_base {
                    return Err(Error::Input("X₀ appears twice".into()));
                }
                with_base = true;
            }
            ScaleMeta::Slab { t_low, t_high } => slabs.push((t_low, t_high)),
            other => return Err(Error::Input(format!("cannot assemble a field tagged {other:?}"))),
        }
    }
    slabs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut t = 0.0;
    for &(lo, hi) in &slabs {
        if (lo - t).abs() > 1e-12 * (1.0 + t) {
            return Err(Error::Input(format!("slabs are not contiguous from 0: gap at {t}..{lo}")));
        }
        t = hi;
    }
    let mut values = vec![0.0; grid.len()];
    for f in fields {
        for (a, v) in values.iter_mut().zip(&f.values) {
            *a += v;
        }
    }
    Ok(GridField {
        grid,
        values,
        meta: ScaleMeta::Martingale { t, with_base },
        seed_path: first.seed_path.clone(),
    })
}

/// Discrete mollification weights h^d θ_ε(|k|h), normalised to sum 1, in
/// Fourier space.
pub fn mollifier_symbol(grid: &GridSpec, fft: &FftNd, moll: &Mollifier) -> Result<Vec<Complex64>> {
    let h = grid.h();
    if moll.d != grid.d {
        return Err(Error::Input("mollifier and grid dimensions differ".into()));
    }
    if moll.eps < h {
        return Err(Error::Resolution(format!("ε = {} is below the lattice spacing {h}", moll.eps)));
    }
    if moll.eps < 2.0 * h {
        log::warn!("ε = {} spans fewer than two lattice cells (h = {h}); mollification is biased", moll.eps);
    }
    if 2.0 * moll.eps >= grid.box_size {
        return Err(Error::Input("mollifier wider than the box".into()));
    }
    let mut w: Vec<Complex64> = (0..grid.len())
        .map(|i| Complex64::new(moll.theta_eps((grid.offset_radius_sq(i) as f64).sqrt() * h), 0.0))
        .collect();
    let total: f64 = w.iter().map(|c| c.re).sum();
    for c in w.iter_mut() {
        *c /= total;
    }
    fft.forward(&mut w);
    Ok(w)
}

/// θ_ε * field by spectral multiplication.
pub fn mollify(field: &GridField, moll: &Mollifier) -> Result<GridField> {
    let fft = FftNd::new(field.grid.n_per_side, field.grid.d);
    let sym = mollifier_symbol(&field.grid, &fft, moll)?;
    mollify_with(field, moll.eps, &sym, &fft)
}

/// Mollification with a precomputed symbol (see [`mollifier_symbol`]).
pub fn mollify_with(field: &GridField, eps: f64, symbol: &[Complex64], fft: &FftNd) -> Result<GridField> {
    let t = match field.meta {
        ScaleMeta::Martingale { t, .. } => Some(t),
        ScaleMeta::Slab { t_high, .. } => Some(t_high),
        ScaleMeta::Base => Some(0.0),
        ScaleMeta::Mollified { .. } => return Err(Error::Input("field is already mollified".into())),
    };
    let mut buf: Vec<Complex64> = field.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    for (b, s) in buf.iter_mut().zip(symbol) {
        *b *= s;
    }
    fft.inverse(&mut buf);
    let n = buf.len() as f64;
    Ok(GridField {
        grid: field.grid,
        values: buf.into_iter().map(|c| c.re / n).collect(),
        meta: ScaleMeta::Mollified { t, eps },
        seed_path: field.seed_path.clone(),
    })
}

/// One output of a [`SpectralFamily`]: a sum of scale groups, optionally mollified.
#[derive(Debug, Clone)]
pub struct Channel {
    pub moll: Option<Mollifier>,
    /// Number of leading scale groups included; `None` includes the unbounded one.
    pub groups: Option<usize>,
}

/// Jointly Gaussian family of fields sharing the same scale-group noise,
/// sampled from aliased continuum spectra.
///
/// Scale groups are [0, b₁], [b₁, b₂], ..., [b_m, ∞) plus X₀; each has its own
/// noise, and every channel is a (filtered) partial sum, so for instance
/// X_{T,ε₁}, X_{ε₂} and X_T come out exactly coupled.
#[derive(Debug, Clone)]
pub struct SpectralFamily {
    grid: GridSpec,
    fft: FftNd,
    channels: Vec<Channel>,
    breaks: Vec<f64>,
    /// Per group, per frequency: row-major PSD root of the channel covariance.
    roots: Vec<Vec<f64>>,
    has_base: bool,
}

impl SpectralFamily {
    pub fn new(kernel: &Kernel, grid: GridSpec, breaks: &[f64], channels: Vec<Channel>) -> Result<Self> {
        grid.validate()?;
        if grid.d != kernel.d() {
            return Err(Error::Input("grid and kernel dimensions differ".into()));
        }
        if channels.is_empty() {
            return Err(Error::Input("family needs at least one channel".into()));
        }
        let mut b = vec![0.0];
        for &x in breaks {
            if !(x > *b.last().expect("nonempty")) || !x.is_finite() {
                return Err(Error::Input("scale group breaks must increase strictly".into()));
            }
            b.push(x);
        }
        let n_groups = b.len();
        for c in &channels {
            if let Some(g) = c.groups {
                if g == 0 || g > n_groups - 1 {
                    return Err(Error::Input(format!("channel includes {g} groups, valid range 1..={}", n_groups - 1)));
                }
            } else if c.moll.is_none() {
                return Err(Error::Input(
                    "an unmollified channel must stop at a finite scale (pointwise variance is infinite)".into(),
                ));
            }
            if let Some(m) = &c.moll {
                if m.eps < grid.h() {
                    return Err(Error::Resolution(format!("ε = {} below the spacing {}", m.eps, grid.h())));
                }
            }
        }
        let d = grid.d;
        let h = grid.h();
        let alias = 2.0 * PI / h;
        let nc = channels.len();
        if nc > 8 {
            return Err(Error::Input("at most 8 channels".into()));
        }
        let has_base = !kernel.spec().k0.is_zero();
        // Group index n_groups (one past the last slab) is X₀.
        let total_groups = n_groups + usize::from(has_base);
        let mut roots = Vec::with_capacity(total_groups);
        for g in 0..total_groups {
            let is_base = g == n_groups;
            let (lo, hi) = if is_base {
                (0.0, Some(0.0))
            } else if g + 1 < n_groups {
                (b[g], Some(b[g + 1]))
            } else {
                (b[g], None)
            };
            let member: Vec<bool> = channels
                .iter()
                .map(|c| is_base || c.groups.is_none_or(|k| g < k))
                .collect();
            let mut cutoff = 0.0f64;
            for (c, &inside) in channels.iter().zip(&member) {
                if !inside {
                    continue;
                }
                let own = match (&c.moll, hi, is_base) {
                    (_, _, true) => kernel.spec().k0.spectral_support(),
                    (Some(m), Some(t), _) => m.hat_support().min(kernel.spectral_support(t)?),
                    (None, Some(t), _) => kernel.spectral_support(t)?,
                    (Some(m), None, _) => m.hat_support(),
                    (None, None, _) => unreachable!("rejected above"),
                };
                cutoff = cutoff.max(own);
            }
            let span = (cutoff / alias).ceil() as i64 + 1;
            let mut group_roots = vec![0.0; grid.len() * nc * nc];
            let mut cov = DMatrix::<f64>::zeros(nc, nc);
            for idx in 0..grid.len() {
                let (xi, _) = grid.frequency(idx);
                cov.fill(0.0);
                let mut err = None;
                let range = |a: usize| if a < d { -span..=span } else { 0..=0 };
                for j0 in range(0) {
                    for j1 in range(1) {
                        for j2 in range(2) {
                            let js = [j0, j1, j2];
                            let mut s = 0.0;
                            for a in 0..d {
                                let v = xi[a] + alias * js[a] as f64;
                                s += v * v;
                            }
                            let k = s.sqrt();
                            if k > cutoff {
                                continue;
                            }
                            let spec = if is_base {
                                kernel.spec().k0.spectral(d, k)
                            } else {
                                match kernel.slab_spectrum(lo, hi, k) {
                                    Ok(v) => v,
                                    Err(e) => {
                                        err.get_or_insert(e);
                                        0.0
                                    }
                                }
                            };
                            if spec == 0.0 {
                                continue;
                            }
                            let mut filt = [0.0; 8];
                            for (c, ch) in channels.iter().enumerate() {
                                filt[c] = if !member[c] {
                                    0.0
                                } else if let Some(m) = &ch.moll {
                                    m.theta_hat_eps(k)?
                                } else {
                                    1.0
                                };
                            }
                            for a in 0..nc {
                                for bb in 0..nc {
                                    cov[(a, bb)] += filt[a] * filt[bb] * spec;
                                }
                            }
                        }
                    }
                }
                if let Some(e) = err {
                    return Err(e);
                }
                cov /= h.powi(d as i32);
                let root = psd_sqrt(&cov, 1e-8)?;
                let off = idx * nc * nc;
                for a in 0..nc {
                    for bb in 0..nc {
                        group_roots[off + a * nc + bb] = root[(a, bb)] / (grid.len() as f64).sqrt();
                    }
                }
            }
            roots.push(group_roots);
        }
        Ok(SpectralFamily { grid, fft: FftNd::new(grid.n_per_side, d), channels, breaks: b, roots, has_base })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// One joint draw of every channel.
    pub fn sample(&self, key: StreamKey) -> Vec<GridField> {
        let nc = self.channels.len();
        let n = self.grid.len();
        let mut spectra = vec![vec![Complex64::new(0.0, 0.0); n]; nc];
        for (g, roots) in self.roots.iter().enumerate() {
            let z = key.with_purpose(StreamKey::purpose_of(STAGE_FAMILY, g as u32)).normal_vec(0, 2 * n * nc);
            for m in 0..n {
                for a in 0..nc {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for b in 0..nc {
                        let r = roots[m * nc * nc + a * nc + b];
                        let q = 2 * (m * nc + b);
                        acc += Complex64::new(r * z[q], r * z[q + 1]);
                    }
                    spectra[a][m] += acc;
                }
            }
        }
        spectra
            .into_iter()
            .zip(&self.channels)
            .map(|(mut buf, ch)| {
                self.fft.inverse(&mut buf);
                let t = ch.groups.map(|k| self.breaks[k]);
                let meta = match &ch.moll {
                    Some(m) => ScaleMeta::Mollified { t, eps: m.eps },
                    None => ScaleMeta::Martingale { t: t.unwrap_or(f64::INFINITY), with_base: self.has_base },
                };
                GridField { grid: self.grid, values: buf.into_iter().map(|c| c.re).collect(), meta, seed_path: key.path() }
            })
            .collect()
    }
}

/// Exact joint samples of (X̄_{t_k}(x_i))_{i,k}: `paths[i][k]`, k over `t_grid`.
pub fn sample_point_paths(kernel: &Kernel, points: &[Vec<f64>], t_grid: &[f64], key: StreamKey) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let mut prev = 0.0;
    for &t in t_grid {
        if !(t > prev || (t == 0.0 && prev == 0.0)) || !t.is_finite() {
            return Err(Error::Input("t_grid must be increasing and nonnegative".into()));
        }
        prev = t;
    }
    let np = points.len();
    let mut paths = vec![Vec::with_capacity(t_grid.len()); np];
    let mut acc = vec![0.0; np];
    let mut lo = 0.0;
    for (k, &t) in t_grid.iter().enumerate() {
        if t > lo {
            let mut g = DMatrix::<f64>::zeros(np, np);
            for i in 0..np {
                for j in 0..=i {
                    let v = kernel.slab_cov(lo, t, Kernel::dist(&points[i], &points[j]))?;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
            let root = psd_sqrt(&g, 1e-8)?;
            let z = DVector::from_vec(key.with_purpose(StreamKey::purpose_of(STAGE_PATHS, k as u32)).normal_vec(0, np));
            let inc = root * z;
            for i in 0..np {
                acc[i] += inc[i];
            }
        }
        for i in 0..np {
            paths[i].push(acc[i]);
        }
        lo = t;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_core::KernelSpec;

    #[test]
    fn grid_geometry() {
        let g = GridSpec::new(1, 8, 4.0).unwrap();
        assert_eq!(g.h(), 0.5);
        assert_eq!(g.point(4)[0], 0.0);
        assert_eq!(g.index_of(&[0.0]), 4);
        assert_eq!(g.torus_dist(0, 7), 0.5);
        assert!(GridSpec::new(1, 12, 4.0).is_err());
        assert!(GridSpec::new(1, 8, 1.5).is_err());
        assert!(g.check_padding(0.5).is_ok());
        assert!(g.check_padding(0.6).is_err());
    }

    #[test]
    fn ladder_construction() {
        let l = ScaleLadder::uniform(0.25, 1.0).unwrap();
        assert_eq!(l.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let l2 = l.with_extra(&[0.6, 5.0]).unwrap();
        assert_eq!(l2.len(), 5);
        assert!(ScaleLadder::new(vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_base_field() {
        let k = KernelSpec::default().build().unwrap();
        let s = SlabSampler::new(&k, GridSpec::new(1, 64, 4.0).unwrap()).unwrap();
        let f = s.sample_x0(StreamKey::new(1, 0, 0)).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mollifying_a_constant_keeps_it() {
        let g = GridSpec::new(1, 256, 4.0).unwrap();
        let f = GridField { grid: g, values: vec![2.5; 256], meta: ScaleMeta::Martingale { t: 1.0, with_base: false }, seed_path: String::new() };
        let m = Mollifier::standard(1, 0.1).unwrap();
        let out = mollify(&f, &m).unwrap();
        assert!(out.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(mollify(&f, &Mollifier::standard(1, 0.01).unwrap()).is_err());
    }

    #[test]
    fn same_key_same_field() {
        let k = KernelSpec::default().build().unwrap();
        let s = SlabSampler::new(&k, GridSpec::new(1, 256, 4.0).unwrap()).unwrap();
        let a = s.sample_slab(0.0, 1.0, StreamKey::new(3, 1, 2)).unwrap();
        let b = s.sample_slab(0.0, 1.0, StreamKey::new(3, 1, 2)).unwrap();
        let c = s.sample_slab(0.0, 1.0, StreamKey::new(3, 2, 2)).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn table_and_spectral_routes_agree() {
        let k = KernelSpec::default().build().unwrap();
        let g = GridSpec::new(1, 512, 4.0).unwrap();
        let s = SlabSampler::new(&k, g).unwrap();
        let lam = s.slab_eigenvalues(0.5, 2.0).unwrap();
        let h = g.h();
        for idx in [0usize, 1, 5, 40, 200, 256, 300] {
            let (xi, _) = g.frequency(idx);
            let spec = alias_sum(1, &xi, 2.0 * PI / h, 3, |q| k.slab_spectrum(0.5, Some(2.0), q)).unwrap() / h;
            assert!((spec - lam[idx]).abs() < 1e-6 * lam[0], "idx {idx}: {spec} vs {}", lam[idx]);
        }
    }

    #[test]
    fn point_paths_shapes_and_independence() {
        let k = KernelSpec::default().build().unwrap();
        let pts = vec![vec![0.0], vec![3.0]];
        let p = sample_point_paths(&k, &pts, &[0.5, 1.0, 2.0], StreamKey::new(1, 0, 0)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].len(), 3);
        assert!(sample_point_paths(&k, &pts, &[1.0, 0.5], StreamKey::new(1, 0, 0)).is_err());
    }
}
