//! Gaussian branching random walk on the 2^d-adic tree of [0,1)^d and its
//! comparison with lattice chaos.
//!
//! Cubes at level ℓ are Morton-indexed: the children of cube c are
//! c·2^d + b for b ∈ [0, 2^d), with bit a of b selecting the upper half along
//! axis a. Leaf m of a depth-n tree is the cube 2^{−n}·(its coordinates) + [0,2^{−n})^d.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field_sampler::{GridField, GridSpec, ScaleLadder, SlabSampler};
use crate::kernel_core::Kernel;
use crate::rng::StreamKey;
use crate::stats::{bootstrap_ci, ols_slope, KahanSum, MeanSe};

const STAGE_TREE: u32 = 16;
const STAGE_SHIFT: u32 = 17;
const MAX_LEAVES: usize = 1 << 24;

/// √(2d log 2), the critical inverse temperature.
pub fn critical_zeta(d: usize) -> f64 {
    (2.0 * d as f64 * std::f64::consts::LN_2).sqrt()
}

/// Leaf values Z_n of one tree realisation.
#[derive(Debug, Clone)]
pub struct DyadicTree {
    pub d: usize,
    pub depth: usize,
    /// Z_n at every leaf, Morton order
    pub leaves: Vec<f64>,
}

impl DyadicTree {
    /// Labels of level ℓ are normals 0..2^{dℓ} of stream (STAGE_TREE, ℓ).
    pub fn sample(d: usize, depth: usize, key: StreamKey) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::Input(format!("dimension must be 1, 2 or 3, got {d}")));
        }
        if d * depth > MAX_LEAVES.trailing_zeros() as usize {
            return Err(Error::Size(format!("2^{} leaves exceed the limit of {MAX_LEAVES}", d * depth)));
        }
        let fan = 1usize << d;
        let mut z = vec![0.0];
        for level in 1..=depth {
            let labels = key.with_purpose(StreamKey::purpose_of(STAGE_TREE, level as u32)).normal_vec(0, z.len() * fan);
            z = labels.par_chunks(fan).zip(z.par_iter()).flat_map_iter(|(ch, &p)| ch.iter().map(move |l| p + l)).collect();
        }
        Ok(DyadicTree { d, depth, leaves: z })
    }

    /// Morton index of the leaf containing x ∈ [0,1)^d (half-open cubes).
    pub fn leaf_of(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d || x.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::Input(format!("point {x:?} is not in [0,1)^{}", self.d)));
        }
        let scale = (1u64 << self.depth) as f64;
        let coords: Vec<u64> = x.iter().map(|v| (v * scale).floor() as u64).collect();
        Ok(morton(&coords, self.depth) as usize)
    }

    pub fn z_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.leaves[self.leaf_of(x)?])
    }
}

/// Interleaves the low `bits` bits of each coordinate (axis 0 least significant).
pub fn morton(coords: &[u64], bits: usize) -> u64 {
    let mut m = 0u64;
    for level in (0..bits).rev() {
        for &c in coords.iter().rev() {
            m = (m << 1) | ((c >> level) & 1);
        }
    }
    m
}

/// Exact depth of the deepest common dyadic cube of x, y ∈ [0,1)^d, capped at `cap`.
pub fn dyadic_k(x: &[f64], y: &[f64], cap: u32) -> u32 {
    let cap = cap.min(52);
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let ia = (a * (1u64 << 52) as f64) as u64;
            let ib = (b * (1u64 << 52) as f64) as u64;
            let diff = ia ^ ib;
            if diff == 0 {
                52
            } else {
                diff.leading_zeros() - 12
            }
        })
        .min()
        .unwrap_or(cap)
        .min(cap)
}

/// Depth of the deepest common ancestor of two Morton leaf indices.
pub fn leaf_k(m1: usize, m2: usize, d: usize, depth: usize) -> usize {
    let diff = (m1 ^ m2) as u64;
    if diff == 0 {
        return depth;
    }
    let top = 64 - diff.leading_zeros() as usize;
    depth - top.div_ceil(d)
}

/// W_{n,ζ} = Σ_m e^{ζ(Z_n(m) − √(2d log2)·n)}, summed in log space.
pub fn partition_function(tree: &DyadicTree, zeta: f64) -> Result<f64> {
    let shift = critical_zeta(tree.d) * tree.depth as f64;
    let expo: Vec<f64> = tree.leaves.iter().map(|z| zeta * (z - shift)).collect();
    let top = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = KahanSum::new();
    for e in &expo {
        acc.add((e - top).exp());
    }
    let w = acc.value().ln() + top;
    if w > 700.0 {
        return Err(Error::numerical("partition function", format!("log W = {w:.1} overflows")));
    }
    Ok(w.exp())
}

/// Closed-form E[W_{n,ζ}] = 2^{dn}e^{n(ζ²/2 − ζ√(2d log2))}.
pub fn expected_partition(d: usize, depth: usize, zeta: f64) -> f64 {
    let n = depth as f64;
    (n * (d as f64 * std::f64::consts::LN_2 + zeta * zeta / 2.0 - zeta * critical_zeta(d))).exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct BrwRun {
    pub zeta: f64,
    pub depth: usize,
    pub values: Vec<f64>,
    pub mean: MeanSe,
}

/// W_{n,ζ} over independent replicas (replica r uses `key` with replica r).
pub fn partition_ensemble(d: usize, depth: usize, zeta: f64, replicas: usize, key: StreamKey) -> Result<BrwRun> {
    let values: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| partition_function(&DyadicTree::sample(d, depth, StreamKey { replica: r, ..key })?, zeta))
        .collect::<Result<_>>()?;
    let mean = MeanSe::of(&values);
    Ok(BrwRun { zeta, depth, values, mean })
}

#[derive(Debug, Clone, Serialize)]
pub struct FractionalMoment {
    pub q: f64,
    pub estimate: MeanSe,
    pub ci: (f64, f64),
}

/// E[W_{n,ζ}^q] for 0 < q ≤ √(2d log2)/ζ.
pub fn fractional_moment(d: usize, depth: usize, zeta: f64, q: f64, replicas: usize, key: StreamKey) -> Result<FractionalMoment> {
    let qmax = critical_zeta(d) / zeta;
    if !(q > 0.0 && q <= qmax * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("need 0 < q ≤ √(2d log2)/ζ = {qmax}, got {q}")));
    }
    let run = partition_ensemble(d, depth, zeta, replicas, key)?;
    let pw: Vec<f64> = run.values.iter().map(|w| w.powf(q)).collect();
    let ci = bootstrap_ci(&pw, |s| s.iter().map(|v| **v).sum::<f64>() / s.len() as f64, 400, 0.95, key.with_purpose(u64::MAX));
    Ok(FractionalMoment { q, estimate: MeanSe::of(&pw), ci })
}

/// OLS slope of log E[W^q] against log n.
pub fn fractional_moment_slope(d: usize, depths: &[usize], zeta: f64, q: f64, replicas: usize, key: StreamKey) -> Result<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n in depths {
        let m = fractional_moment(d, n, zeta, q, replicas, key)?;
        xs.push((n as f64).ln());
        ys.push(m.estimate.mean.ln());
    }
    Ok(ols_slope(&xs, &ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// the expected order with separation beyond 2 SE
    Holds,
    /// within 2 SE either way
    Overlap,
    /// between 2 and 3 SE against the expected order
    Weak,
    /// beyond 3 SE against the expected order
    Reversed,
}

#[derive(Debug, Clone, Serialize)]
pub struct KahaneReport {
    /// additive constant A, with its safety margin
    pub shift: f64,
    pub lattice_time: f64,
    /// E[F] for the dominated covariance (tree)
    pub dominated: MeanSe,
    /// E[F] for the dominating covariance (lattice field plus √A·N)
    pub dominating: MeanSe,
    pub difference: MeanSe,
    pub ordering: Ordering,
    pub probes: usize,
}

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct KahaneConfig {
    pub depth: usize,
    /// real chaos parameter; the tree field is √(log 2)·Z_n
    pub gamma: f64,
    /// F(u) = u^{p/2}
    pub p: f64,
    pub replicas: usize,
    /// lattice sites per unit length (power of two, ≥ 2^depth)
    pub sites_per_unit: usize,
    pub probes: usize,
}

/// One concave functional evaluation per replica, for both chaoses on the
/// lattice sites of [0,1): F(h Σ e^{γY − γ²Var/2}).
///
/// For a concave F, pointwise domination C₁ ≤ C₂ gives E[F(M₁)] ≥ E[F(M₂)].
pub fn kahane_compare(kernel: &Kernel, cfg: &KahaneConfig, key: StreamKey) -> Result<KahaneReport> {
    if kernel.d() != 1 {
        return Err(Error::Input("the tree comparison is implemented for d = 1".into()));
    }
    if !(cfg.p > 0.0 && cfg.p <= 2.0) {
        return Err(Error::Input(format!("u^{{p/2}} is concave only for p ≤ 2, got {}", cfg.p)));
    }
    let per_unit = cfg.sites_per_unit;
    if !per_unit.is_power_of_two() || per_unit < (1 << cfg.depth) {
        return Err(Error::Input("sites_per_unit must be a power of two ≥ 2^depth".into()));
    }
    let grid = GridSpec::new(1, 4 * per_unit, 4.0)?;
    let sites: Vec<usize> = (0..grid.len()).filter(|&i| (0.0..1.0).contains(&grid.point(i)[0])).collect();
    let xs: Vec<f64> = sites.iter().map(|&i| grid.point(i)[0]).collect();
    let ln2 = std::f64::consts::LN_2;
    let lattice_time = (cfg.depth as f64 * ln2).ceil();
    let tree_cov = |x: f64, y: f64| ln2 * dyadic_k(&[x], &[y], cfg.depth as u32) as f64;
    let lat_cov = |x: f64, y: f64| kernel.k_t(lattice_time, (x - y).abs());

    // A from one probe set, verified on a second one
    let probe = |purpose: u64| -> Vec<(f64, f64)> {
        let mut u = vec![0.0; 2 * cfg.probes];
        key.with_purpose(StreamKey::purpose_of(STAGE_SHIFT, purpose as u32)).uniforms(0, &mut u);
        u.chunks(2)
            .enumerate()
            .map(|(i, c)| {
                let x = xs[(c[0] * xs.len() as f64) as usize % xs.len()];
                // half the probes at short range, where domination is tight
                let y = if i % 2 == 0 { xs[(c[1] * xs.len() as f64) as usize % xs.len()] } else { (x + c[1] * 4.0 / (1 << cfg.depth) as f64).min(xs[xs.len() - 1]) };
                (x, y)
            })
            .collect()
    };
    let mut gap: f64 = 0.0;
    for (x, y) in probe(0).into_iter().chain(xs.iter().map(|&x| (x, x))) {
        gap = gap.max(tree_cov(x, y) - lat_cov(x, y)?);
    }
    let shift = 1.1 * gap.max(0.0);
    for (x, y) in probe(1) {
        let (c1, c2) = (tree_cov(x, y), lat_cov(x, y)? + shift);
        if c1 > c2 + 1e-12 {
            return Err(Error::Precondition(format!("covariance domination fails at ({x}, {y}): {c1} > {c2}")));
        }
    }

    let sampler = SlabSampler::new(kernel, grid)?;
    let ladder = ScaleLadder::new(vec![0.0, lattice_time])?;
    let leaf: Vec<usize> = xs.iter().map(|&x| (x * (1u64 << cfg.depth) as f64).floor() as usize).collect();
    let g = cfg.gamma;
    let h = grid.h();
    let var_tree = ln2 * cfg.depth as f64;
    let var_lat = kernel.spec().k0.diag() + lattice_time + shift;
    let concave = |u: f64| u.powf(cfg.p / 2.0);
    let rows: Vec<(f64, f64)> = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let rk = StreamKey { replica: r, ..key };
            let tree = DyadicTree::sample(1, cfg.depth, rk)?;
            let field: GridField = sampler.sample_ladder(&ladder, rk)?.top()?;
            let extra = shift.sqrt() * rk.with_purpose(StreamKey::purpose_of(STAGE_SHIFT, 2)).normal_vec(0, 1)[0];
            let (mut m1, mut m2) = (KahanSum::new(), KahanSum::new());
            for (k, &s) in sites.iter().enumerate() {
                m1.add((g * ln2.sqrt() * tree.leaves[leaf[k]] - 0.5 * g * g * var_tree).exp());
                m2.add((g * (field.values[s] + extra) - 0.5 * g * g * var_lat).exp());
            }
            Ok((concave(h * m1.value()), concave(h * m2.value())))
        })
        .collect::<Result<_>>()?;
    let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let difference = MeanSe::of(&diff);
    let z = difference.mean / difference.se_or_inf();
    let ordering = if z > 2.0 {
        Ordering::Holds
    } else if z >= -2.0 {
        Ordering::Overlap
    } else if z >= -3.0 {
        Ordering::Weak
    } else {
        Ordering::Reversed
    };
    Ok(KahaneReport {
        shift,
        lattice_time,
        dominated: MeanSe::of(&a),
        dominating: MeanSe::of(&b),
        difference,
        ordering,
        probes: 2 * cfg.probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_sums_to_one() {
        let t = DyadicTree::sample(1, 0, StreamKey::new(1, 0, 0)).unwrap();
        assert_eq!(partition_function(&t, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn morton_and_common_depth_agree() {
        // d = 2, depth 3: points in leaves (x=5, y=2) and (x=4, y=3)
        let m1 = morton(&[5, 2], 3) as usize;
        let m2 = morton(&[4, 3], 3) as usize;
        let k = leaf_k(m1, m2, 2, 3);
        let x = [5.5 / 8.0, 2.5 / 8.0];
        let y = [4.5 / 8.0, 3.5 / 8.0];
        assert_eq!(k as u32, dyadic_k(&x, &y, 3));
        assert_eq!(k, 2);
        let t = DyadicTree { d: 2, depth: 3, leaves: vec![0.0; 64] };
        assert_eq!(t.leaf_of(&x).unwrap(), m1);
    }

    #[test]
    fn half_open_cubes() {
        assert_eq!(dyadic_k(&[0.5], &[0.499_999_999], 10), 0);
        assert_eq!(dyadic_k(&[0.5], &[0.75 - 1e-12], 10), 2);
        assert_eq!(dyadic_k(&[0.5], &[0.75], 10), 1);
        let t = DyadicTree { d: 1, depth: 2, leaves: vec![0.0; 4] };
        assert_eq!(t.leaf_of(&[0.25]).unwrap(), 1);
        assert!(t.leaf_of(&[1.0]).is_err());
    }

    #[test]
    fn size_guard() {
        assert!(matches!(DyadicTree::sample(2, 13, StreamKey::new(0, 0, 0)), Err(Error::Size(_))));
    }

    #[test]
    fn critical_expectation_is_one() {
        assert!((expected_partition(1, 7, critical_zeta(1)) - 1.0).abs() < 1e-12);
        assert!((expected_partition(2, 4, critical_zeta(2)) - 1.0).abs() < 1e-12);
    }
}
