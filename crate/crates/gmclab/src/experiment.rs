//! Experiment configs, the registry of runnable experiments, batch runs with
//! CSV + JSON sidecar output, and reports.
//!
//! Column names of the form `name@x` form a trend group: the report fits the
//! column means against x.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::brw_comparator::{critical_zeta, expected_partition, partition_function, DyadicTree};
use crate::clt_harness::GmcFamily;
use crate::error::{Error, Result};
use crate::field_sampler::{mollify, Channel, GridSpec, ScaleLadder, SlabSampler, SpectralFamily};
use crate::gaussian_tools::{barrier_mc, drifted_barrier_prob};
use crate::gmc_measure::{measure_eps, measure_t, TestFunction};
use crate::kernel_core::{ComplexGamma, KernelSpec, Mollifier, ThetaProfile};
use crate::normalization::NormContext;
use crate::qv_estimator::{CellQuadrature, LawLargeNumbersConfig, LawLargeNumbersSetup, PairMode};
use crate::rng::StreamKey;
use crate::stats::{ols_slope, MeanSe};

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        let a = 0.5_f64.sqrt();
        GammaConfig { alpha: a, beta: a }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_per_side: usize,
    pub box_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n_per_side: 1024, box_size: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub dt: f64,
    pub t_max: f64,
    /// times of interest inserted into the ladder
    pub probe_times: Vec<f64>,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig { dt: 0.25, t_max: 2.0, probe_times: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MollifierConfig {
    pub theta: ThetaProfile,
    pub eps: Vec<f64>,
}

impl Default for MollifierConfig {
    fn default() -> Self {
        MollifierConfig { theta: ThetaProfile::default(), eps: vec![0.125] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestFunctionConfig {
    pub preset: String,
    pub radius: f64,
}

impl Default for TestFunctionConfig {
    fn default() -> Self {
        TestFunctionConfig { preset: "bump".into(), radius: 0.25 }
    }
}

impl TestFunctionConfig {
    pub fn build(&self) -> Result<TestFunction> {
        TestFunction::preset(&self.preset, self.radius)
    }
}

/// Everything that determines the numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub replicas: usize,
    /// not part of the hash
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub gamma: GammaConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub mollifier: MollifierConfig,
    #[serde(default)]
    pub test_function: TestFunctionConfig,
    /// experiment-specific numeric knobs
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// experiment-specific string knobs
    #[serde(default)]
    pub options: BTreeMap<String, String>,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn new(experiment: &str, seed: u64, replicas: usize) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.into(),
            seed,
            replicas,
            output_dir: None,
            kernel: KernelSpec::default(),
            gamma: GammaConfig::default(),
            grid: GridConfig::default(),
            ladder: LadderConfig::default(),
            mollifier: MollifierConfig::default(),
            test_function: TestFunctionConfig::default(),
            params: BTreeMap::new(),
            options: BTreeMap::new(),
            tolerances: BTreeMap::new(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        lookup(&self.experiment)?;
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        self.kernel.validate()
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn param(&self, name: &str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }

    pub fn option<'a>(&'a self, name: &str, default: &'a str) -> &'a str {
        self.options.get(name).map(String::as_str).unwrap_or(default)
    }

    pub fn tolerance(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }

    fn gamma(&self) -> Result<ComplexGamma> {
        ComplexGamma::new(self.kernel.d, self.gamma.alpha, self.gamma.beta)
    }

    fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.kernel.d, self.grid.n_per_side, self.grid.box_size)
    }
}

/// A registered experiment and the CLI command that runs it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExperimentInfo {
    pub id: &'static str,
    pub command: &'static str,
    pub probes: &'static str,
    /// rows are probes of a deterministic computation rather than replicas
    pub deterministic: bool,
}

pub const REGISTRY: &[ExperimentInfo] = &[
    ExperimentInfo {
        id: "kernel_check",
        command: "kernel check",
        probes: "diagonal of the star-scale covariance and the long-range log identity",
        deterministic: true,
    },
    ExperimentInfo { id: "sample_field", command: "sample field", probes: "field sampler covariances", deterministic: false },
    ExperimentInfo { id: "measure", command: "measure", probes: "mollified and martingale chaos means", deterministic: false },
    ExperimentInfo { id: "norms", command: "norms", probes: "normalising sequences and the replacement ratio", deterministic: true },
    ExperimentInfo { id: "qv", command: "qv", probes: "restricted law of large numbers for the quadratic variation", deterministic: false },
    ExperimentInfo { id: "clt", command: "clt", probes: "mixed-Gaussian limit of the critical complex chaos", deterministic: false },
    ExperimentInfo { id: "brw", command: "brw", probes: "branching random walk partition function", deterministic: false },
    ExperimentInfo { id: "selftest_gaussian", command: "selftest gaussian", probes: "Brownian barrier closed forms", deterministic: false },
];

pub fn lookup(id: &str) -> Result<&'static ExperimentInfo> {
    REGISTRY.iter().find(|e| e.id == id).ok_or_else(|| Error::Registry {
        kind: "experiment".into(),
        name: id.into(),
        valid: REGISTRY.iter().map(|e| e.id).collect::<Vec<_>>().join(", "),
    })
}

type RowFn<'a> = Box<dyn Fn(u64) -> Result<Vec<f64>> + Sync + 'a>;

/// Resolved experiment: column schema, number of rows and a row evaluator.
struct Plan<'a> {
    columns: Vec<String>,
    rows: usize,
    row: RowFn<'a>,
}

fn tag(x: f64) -> String {
    format!("{x}")
}

fn barrier_cases() -> Vec<(f64, f64, f64)> {
    vec![(1.0, 1.0, 0.0), (4.0, 1.0, 1.0), (9.0, 2.0, 1.0)]
}

fn brw_depths(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.params.get("depth") {
        Some(&n) => vec![n as usize],
        None => vec![5, 10, 15],
    }
}

fn qv_config(cfg: &ExperimentConfig) -> Result<LawLargeNumbersConfig> {
    let mode = match cfg.option("pair_mode", "spectral") {
        "spectral" => PairMode::Spectral,
        "cell_list" => PairMode::CellList,
        "exhaustive" => PairMode::Exhaustive,
        other => return Err(Error::Registry { kind: "pair mode".into(), name: other.into(), valid: "spectral, cell_list, exhaustive".into() }),
    };
    let quadrature = match cfg.option("cell_quadrature", "point") {
        "point" => CellQuadrature::Point,
        "subcell" => CellQuadrature::Subcell,
        other => return Err(Error::Registry { kind: "cell quadrature".into(), name: other.into(), valid: "point, subcell".into() }),
    };
    let t_list = if cfg.ladder.probe_times.is_empty() { vec![cfg.ladder.t_max] } else { cfg.ladder.probe_times.clone() };
    Ok(LawLargeNumbersConfig {
        t_list,
        q: cfg.param("q", 3.0),
        radius: cfg.param("radius", cfg.test_function.radius),
        replicas: cfg.replicas,
        n_per_side: cfg.grid.n_per_side,
        box_size: cfg.grid.box_size,
        dt: cfg.ladder.dt,
        f_radius: cfg.test_function.radius,
        seed: cfg.seed,
        mode,
        quadrature,
    })
}

fn plan(cfg: &ExperimentConfig) -> Result<Plan<'static>> {
    let info = lookup(&cfg.experiment)?;
    let kernel = cfg.kernel.build()?;
    let d = kernel.d();
    let seed = cfg.seed;
    let key = move |r: u64| StreamKey::new(seed, r, 0);
    match info.id {
        "kernel_check" => {
            let r0 = (-kernel.spec().eta1 / kernel.spec().eta2).exp();
            let probes = 20usize;
            let row = move |i: u64| -> Result<Vec<f64>> {
                let s = i as f64 / (probes - 1) as f64;
                let t = 0.5 + 7.5 * s;
                let kbar = kernel.bar_k_t(t, 0.0)?;
                let radius = r0 * (10.0 / r0).powf(s);
                let resid = kernel.bar_ell(radius)? - (1.0 / radius).ln() + kernel.j_const();
                Ok(vec![t, kbar, (kbar - t).abs() / t, radius, resid])
            };
            Ok(Plan { columns: cols(&["t", "kbar_diag", "kbar_rel_err", "radius", "ell_residual"]), rows: probes, row: Box::new(row) })
        }
        "norms" => {
            let ctx = NormContext::new(&kernel, None, cfg.gamma()?)?;
            let moll_profile = cfg.mollifier.theta;
            let times: Vec<f64> = if cfg.ladder.probe_times.is_empty() { vec![2.0, 5.0, 10.0, 20.0] } else { cfg.ladder.probe_times.clone() };
            let n = times.len();
            let gamma = cfg.gamma()?;
            let row = move |i: u64| -> Result<Vec<f64>> {
                let t = times[i as usize];
                let eps = (-t).exp();
                let m = Mollifier::new(d, moll_profile, eps)?;
                let v_eps = NormContext::new(&kernel, Some(&m), gamma)?.v_eps(eps).unwrap_or(f64::NAN);
                Ok(vec![t, ctx.phi_t(t)?, ctx.v_t(t)?, ctx.replacement_ratio(t)?, eps, v_eps])
            };
            Ok(Plan { columns: cols(&["t", "phi_t", "v_t", "replacement_ratio", "eps", "v_eps"]), rows: n, row: Box::new(row) })
        }
        "sample_field" => {
            let grid = cfg.grid()?;
            let ladder = ScaleLadder::uniform(cfg.ladder.dt, cfg.ladder.t_max)?;
            let sampler = SlabSampler::new(&kernel, grid)?;
            let eps = *cfg.mollifier.eps.first().ok_or_else(|| Error::Config("sample_field needs one ε".into()))?;
            let moll = Mollifier::new(d, cfg.mollifier.theta, eps)?;
            let offset = cfg.param("probe_offset", 0.1);
            let row = move |r: u64| -> Result<Vec<f64>> {
                let sample = sampler.sample_ladder(&ladder, key(r))?;
                let xt = sample.top()?;
                let xe = mollify(&xt, &moll)?;
                let origin = vec![0.0; d];
                let mut probe = vec![0.0; d];
                probe[0] = offset;
                let mean_sq = xt.values.iter().map(|v| v * v).sum::<f64>() / xt.values.len() as f64;
                Ok(vec![sample.base.at(&origin), xt.at(&origin), xe.at(&origin), xt.at(&origin) * xt.at(&probe), xe.at(&origin) * xt.at(&origin), mean_sq])
            };
            Ok(Plan {
                columns: cols(&["x0_origin", "xt_origin", "xt_eps_origin", "xt_pair_product", "cross_product", "xt_mean_square"]),
                rows: cfg.replicas,
                row: Box::new(row),
            })
        }
        "measure" => {
            let grid = cfg.grid()?;
            let gamma = cfg.gamma()?;
            let f = cfg.test_function.build()?;
            let molls: Vec<Mollifier> = cfg.mollifier.eps.iter().map(|&e| Mollifier::new(d, cfg.mollifier.theta, e)).collect::<Result<_>>()?;
            let t = cfg.ladder.t_max;
            let mut channels: Vec<Channel> = molls.iter().map(|m| Channel { moll: Some(m.clone()), groups: None }).collect();
            channels.push(Channel { moll: None, groups: Some(1) });
            let family = SpectralFamily::new(&kernel, grid, &[t], channels)?;
            let mut columns = Vec::new();
            for m in &molls {
                columns.push(format!("m_eps_re@{}", tag(m.eps)));
                columns.push(format!("m_eps_im@{}", tag(m.eps)));
            }
            columns.extend(cols(&["m_t_re", "m_t_im"]));
            let row = move |r: u64| -> Result<Vec<f64>> {
                let fields = family.sample(key(r));
                let mut out = Vec::new();
                for (field, m) in fields.iter().zip(&molls) {
                    let v = measure_eps(field, &kernel, m, &gamma, &f)?.value();
                    out.extend([v.re, v.im]);
                }
                let v = measure_t(fields.last().expect("martingale channel"), &kernel, &gamma, &f)?.value();
                out.extend([v.re, v.im]);
                Ok(out)
            };
            Ok(Plan { columns, rows: cfg.replicas, row: Box::new(row) })
        }
        "qv" => {
            let lcfg = qv_config(cfg)?;
            let setup = LawLargeNumbersSetup::new(&kernel, &cfg.gamma()?, &lcfg)?;
            let mut columns = Vec::new();
            for &t in setup.t_list() {
                for name in ["a_ratio", "b_ratio", "proxy", "survived", "restricted_distance"] {
                    columns.push(format!("{name}@{}", tag(t)));
                }
            }
            let row = move |r: u64| -> Result<Vec<f64>> {
                let pts = setup.replica(r)?;
                let mut out = Vec::new();
                for p in pts {
                    let s = if p.survived { 1.0 } else { 0.0 };
                    out.extend([p.a_ratio, p.b_ratio, p.proxy, s, s * (p.a_ratio - p.proxy).abs()]);
                }
                Ok(out)
            };
            Ok(Plan { columns, rows: cfg.replicas, row: Box::new(row) })
        }
        "clt" => {
            let grid = cfg.grid()?;
            let fam = GmcFamily::new(&kernel, grid, cfg.gamma()?, cfg.mollifier.eps.clone(), cfg.test_function.build()?, cfg.param("omega", 0.0))?;
            let mut columns = Vec::new();
            for &e in &cfg.mollifier.eps {
                columns.push(format!("w_over_v@{}", tag(e)));
                columns.push(format!("z@{}", tag(e)));
            }
            columns.push("h_coarse".into());
            let scales: Vec<f64> = (0..cfg.mollifier.eps.len()).map(|k| crate::clt_harness::MartingaleFamily::scale(&fam, k)).collect::<Result<_>>()?;
            let row = move |r: u64| -> Result<Vec<f64>> {
                let draws = fam.draw_all(key(r))?;
                let mut out = Vec::new();
                for (dr, v) in draws.iter().zip(&scales) {
                    out.extend([dr.terminal / v, dr.z]);
                }
                out.push(draws[0].h[1]);
                Ok(out)
            };
            Ok(Plan { columns, rows: cfg.replicas, row: Box::new(row) })
        }
        "brw" => {
            let depths = brw_depths(cfg);
            let zeta = cfg.param("zeta", critical_zeta(d));
            let columns = depths.iter().map(|n| format!("w@{n}")).collect();
            let row = move |r: u64| -> Result<Vec<f64>> {
                depths
                    .iter()
                    .map(|&n| {
                        let k = StreamKey::new(seed, r, n as u64);
                        partition_function(&DyadicTree::sample(d, n, k)?, zeta)
                    })
                    .collect()
            };
            Ok(Plan { columns, rows: cfg.replicas, row: Box::new(row) })
        }
        "selftest_gaussian" => {
            let cases = barrier_cases();
            let dt = cfg.param("dt", 1e-3);
            let paths = cfg.param("paths_per_replica", 100.0) as usize;
            let columns = (0..cases.len()).map(|k| format!("survival_case{k}")).collect();
            let row = move |r: u64| -> Result<Vec<f64>> {
                cases
                    .iter()
                    .enumerate()
                    .map(|(k, &(t, a, b))| Ok(barrier_mc(t, a, b, dt, paths, StreamKey::new(seed, r, k as u64))?.mean))
                    .collect()
            };
            Ok(Plan { columns, rows: cfg.replicas, row: Box::new(row) })
        }
        _ => unreachable!("registry and dispatcher disagree"),
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Header sidecar written next to every CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub code_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub columns: Vec<String>,
    pub deterministic: bool,
    pub rows: usize,
    pub failed_rows: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: Vec<u8>,
    pub sidecar: Sidecar,
}

#[derive(Debug, Clone)]
pub struct RunFiles {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Runs every replica (in parallel) and renders the CSV in replica order.
/// A failing replica gets an empty row with its error message.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let info = lookup(&cfg.experiment)?;
    let started = now();
    let plan = plan(cfg)?;
    let results: Vec<Result<Vec<f64>>> = (0..plan.rows as u64).into_par_iter().map(|r| (plan.row)(r)).collect();
    let hash = cfg.hash();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["experiment".to_string(), "config_hash".into(), "replica".into()];
    header.extend(plan.columns.iter().cloned());
    header.push("error".into());
    w.write_record(&header).map_err(csv_error)?;
    let mut failed = 0;
    for (r, res) in results.iter().enumerate() {
        let mut rec = vec![cfg.experiment.clone(), hash.clone(), r.to_string()];
        match res {
            Ok(vals) if vals.len() == plan.columns.len() => {
                rec.extend(vals.iter().map(|v| format!("{v:?}")));
                rec.push(String::new());
            }
            Ok(vals) => return Err(Error::numerical("experiment row", format!("{} values for {} columns", vals.len(), plan.columns.len()))),
            Err(e) => {
                failed += 1;
                rec.extend(plan.columns.iter().map(|_| String::new()));
                rec.push(e.to_string());
            }
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    let csv = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION,
        code_version: CODE_VERSION.into(),
        config_hash: hash,
        config: cfg.clone(),
        columns: plan.columns,
        deterministic: info.deterministic,
        rows: plan.rows,
        failed_rows: failed,
        started_unix: started,
        finished_unix: now(),
    };
    Ok(RunOutput { csv, sidecar })
}

/// File stem `<experiment>-<first 12 hash digits>`.
pub fn file_stem(cfg: &ExperimentConfig) -> String {
    format!("{}-{}", cfg.experiment, &cfg.hash()[..12])
}

/// Runs and writes `<stem>.csv` and `<stem>.json` into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunFiles> {
    let out = run_in_memory(cfg)?;
    fs::create_dir_all(out_dir)?;
    let stem = file_stem(cfg);
    let csv = out_dir.join(format!("{stem}.csv"));
    let sidecar = out_dir.join(format!("{stem}.json"));
    fs::write(&csv, &out.csv)?;
    fs::write(&sidecar, serde_json::to_vec_pretty(&out.sidecar).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(RunFiles { csv, sidecar })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub mean: Option<f64>,
    /// `None` when fewer than two finite values exist
    pub se: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendSummary {
    pub name: String,
    pub x: Vec<f64>,
    pub means: Vec<f64>,
    pub slope: f64,
    pub strictly_decreasing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub experiment: Option<String>,
    pub config_hash: Option<String>,
    pub code_version: Option<String>,
    /// set when the CSV has no successful rows
    pub no_data: bool,
    pub rows: usize,
    pub failed_rows: usize,
    pub columns: Vec<ColumnSummary>,
    pub trends: Vec<TrendSummary>,
    pub checks: Vec<CheckResult>,
    pub all_checks_pass: bool,
    pub notes: Vec<String>,
}

/// Sidecar path for a CSV path.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Summarises a CSV produced by [`run`] (plus its sidecar, when present).
pub fn report(csv_path: &Path) -> Result<Report> {
    let sidecar: Option<Sidecar> = fs::read(sidecar_path(csv_path))
        .ok()
        .map(|b| serde_json::from_slice(&b).map_err(|e| Error::Config(format!("bad sidecar: {e}"))))
        .transpose()?;
    let mut reader = csv::Reader::from_path(csv_path).map_err(csv_error)?;
    let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(String::from).collect();
    let mut records = Vec::new();
    for rec in reader.records() {
        records.push(rec.map_err(csv_error)?);
    }
    summarize(&header, &records, sidecar.as_ref())
}

fn summarize(header: &[String], records: &[csv::StringRecord], sidecar: Option<&Sidecar>) -> Result<Report> {
    let n_cols = header.len();
    let stat_range = 3..n_cols.saturating_sub(1);
    let err_idx = n_cols.saturating_sub(1);
    let ok: Vec<&csv::StringRecord> = records.iter().filter(|r| r.get(err_idx).is_none_or(str::is_empty)).collect();
    let failed = records.len() - ok.len();
    let mut notes = Vec::new();
    let empty = Report {
        experiment: sidecar.map(|s| s.config.experiment.clone()),
        config_hash: sidecar.map(|s| s.config_hash.clone()),
        code_version: sidecar.map(|s| s.code_version.clone()),
        no_data: true,
        rows: records.len(),
        failed_rows: failed,
        columns: Vec::new(),
        trends: Vec::new(),
        checks: Vec::new(),
        all_checks_pass: false,
        notes: vec!["no data: the result file has no successful rows".into()],
    };
    if ok.is_empty() {
        return Ok(empty);
    }
    let mut columns = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in stat_range {
        let name = header[c].clone();
        let xs: Vec<f64> = ok.iter().filter_map(|r| r.get(c)?.parse::<f64>().ok()).filter(|v| v.is_finite()).collect();
        let ms = MeanSe::of(&xs);
        columns.push(ColumnSummary { name: name.clone(), mean: (ms.n > 0).then_some(ms.mean), se: ms.se, n: ms.n });
        values.insert(name, xs);
    }
    if ok.len() == 1 {
        notes.push("single replica: standard errors unavailable".into());
    }
    if failed > 0 {
        notes.push(format!("{failed} rows failed; see the error column"));
    }
    let trends = trends(&columns);
    let checks = match sidecar {
        Some(s) => checks(&s.config, &columns, &values)?,
        None => {
            notes.push("no sidecar found: acceptance checks skipped".into());
            Vec::new()
        }
    };
    let all_checks_pass = checks.iter().all(|c| c.pass);
    Ok(Report { no_data: false, columns, trends, all_checks_pass, checks, notes, ..empty })
}

fn trends(columns: &[ColumnSummary]) -> Vec<TrendSummary> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for c in columns {
        if let (Some((base, x)), Some(m)) = (c.name.split_once('@'), c.mean) {
            if let Ok(x) = x.parse::<f64>() {
                groups.entry(base.to_string()).or_default().push((x, m));
            }
        }
    }
    groups
        .into_iter()
        .filter(|(_, pts)| pts.len() >= 2)
        .map(|(name, pts)| {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let means: Vec<f64> = pts.iter().map(|p| p.1).collect();
            TrendSummary { slope: ols_slope(&x, &means), strictly_decreasing: means.windows(2).all(|w| w[1] < w[0]), name, x, means }
        })
        .collect()
}

fn within_se(name: String, col: &ColumnSummary, target: f64, k: f64) -> CheckResult {
    let mean = col.mean.unwrap_or(f64::NAN);
    let tol = k * col.se.unwrap_or(f64::INFINITY);
    CheckResult { name, value: mean, target, tolerance: tol, pass: (mean - target).abs() <= tol }
}

/// Acceptance thresholds attached to experiments with a known answer.
fn checks(cfg: &ExperimentConfig, columns: &[ColumnSummary], values: &BTreeMap<String, Vec<f64>>) -> Result<Vec<CheckResult>> {
    let col = |name: &str| columns.iter().find(|c| c.name == name);
    let max_abs = |name: &str| values.get(name).map(|v| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))).unwrap_or(f64::NAN);
    let k = cfg.tolerance("se_multiple", 3.0);
    let mut out = Vec::new();
    match cfg.experiment.as_str() {
        "kernel_check" => {
            for (name, tol) in [("kbar_rel_err", cfg.tolerance("kbar_rel", 1e-7)), ("ell_residual", cfg.tolerance("ell_abs", 1e-6))] {
                let v = max_abs(name);
                out.push(CheckResult { name: format!("max |{name}|"), value: v, target: 0.0, tolerance: tol, pass: v < tol });
            }
        }
        "selftest_gaussian" => {
            for (i, &(t, a, b)) in barrier_cases().iter().enumerate() {
                let name = format!("survival_case{i}");
                if let Some(c) = col(&name) {
                    out.push(within_se(format!("{name} (t={t}, a={a}, b={b})"), c, drifted_barrier_prob(t, a, b)?, k));
                }
            }
        }
        "brw" => {
            let d = cfg.kernel.d;
            let zeta = cfg.param("zeta", critical_zeta(d));
            for n in brw_depths(cfg) {
                if let Some(c) = col(&format!("w@{n}")) {
                    out.push(within_se(format!("E[W] at depth {n}"), c, expected_partition(d, n, zeta), k));
                }
            }
        }
        "measure" => {
            let grid = cfg.grid()?;
            let target: Complex64 = cfg.test_function.build()?.lattice_integral(&grid);
            for &e in &cfg.mollifier.eps {
                if let Some(c) = col(&format!("m_eps_re@{}", tag(e))) {
                    out.push(within_se(format!("E[Re M] at eps {e}"), c, target.re, k));
                }
            }
            if let Some(c) = col("m_t_re") {
                out.push(within_se("E[Re M_t]".into(), c, target.re, k));
            }
        }
        "norms" => {
            let lo = cfg.tolerance("ratio_low", 0.9);
            let hi = cfg.tolerance("ratio_high", 1.1);
            if let Some(v) = values.get("replacement_ratio").and_then(|v| v.last()) {
                out.push(CheckResult { name: "replacement ratio at the largest t".into(), value: *v, target: 1.0, tolerance: hi - 1.0, pass: (lo..=hi).contains(v) });
            }
        }
        _ => {}
    }
    Ok(out)
}

/// gnuplot script: per-replica scatter for every statistic and mean ± SE
/// for every trend group.
pub fn plot_script(csv_path: &Path, report: &Report) -> String {
    let file = csv_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "result".into());
    let mut s = String::new();
    s.push_str("# gnuplot script; run from the directory holding the CSV\n");
    s.push_str("set datafile separator ','\nset terminal pngcairo size 900,600\nset grid\n");
    for (i, c) in report.columns.iter().enumerate() {
        let idx = i + 4;
        s.push_str(&format!(
            "set output '{stem}_{col}.png'\nset xlabel 'replica'\nset ylabel '{col}'\nplot '{file}' every ::1 using 3:{idx} with points pt 7 ps 0.4 title '{col}'\n",
            col = sanitize(&c.name)
        ));
    }
    for t in &report.trends {
        let name = sanitize(&t.name);
        s.push_str(&format!("${name} << EOD\n"));
        for (x, m) in t.x.iter().zip(&t.means) {
            let se = report.columns.iter().find(|c| c.name == format!("{}@{}", t.name, tag(*x))).and_then(|c| c.se).unwrap_or(0.0);
            s.push_str(&format!("{x} {m} {se}\n"));
        }
        s.push_str("EOD\n");
        s.push_str(&format!(
            "set output '{stem}_trend_{name}.png'\nset xlabel 'index'\nset ylabel 'mean'\nplot ${name} using 1:2:3 with yerrorlines title '{name}'\n"
        ));
    }
    s
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

/// Writes `<stem>.summary.json` and `<stem>.gp` next to the CSV.
pub fn write_report(csv_path: &Path) -> Result<(Report, PathBuf, PathBuf)> {
    let rep = report(csv_path)?;
    let json = csv_path.with_extension("summary.json");
    let gp = csv_path.with_extension("gp");
    fs::write(&json, serde_json::to_vec_pretty(&rep).map_err(|e| Error::Config(e.to_string()))?)?;
    fs::write(&gp, plot_script(csv_path, &rep))?;
    Ok((rep, json, gp))
}

/// Default output directory: `$GMCLAB_OUT`, else `./gmclab-out`.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os("GMCLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("gmclab-out"))
}

/// Small configs for every registered experiment, used by determinism checks.
pub fn smoke_config(id: &str, seed: u64) -> Result<ExperimentConfig> {
    lookup(id)?;
    let mut cfg = ExperimentConfig::new(id, seed, 4);
    match id {
        "kernel_check" | "norms" => {}
        "sample_field" => cfg.grid.n_per_side = 256,
        "measure" => {
            cfg.grid.n_per_side = 512;
            cfg.ladder.t_max = 1.0;
        }
        "qv" => {
            cfg.grid.n_per_side = 256;
            cfg.ladder = LadderConfig { dt: 0.5, t_max: 3.0, probe_times: vec![3.0] };
            cfg.options.insert("cell_quadrature".into(), "subcell".into());
        }
        "clt" => {
            cfg.grid.n_per_side = 512;
            cfg.mollifier.eps = vec![0.125, 0.0625];
        }
        "brw" => {
            cfg.params.insert("depth".into(), 6.0);
        }
        "selftest_gaussian" => {
            cfg.params.insert("dt".into(), 0.01);
            cfg.params.insert("paths_per_replica".into(), 20.0);
        }
        _ => unreachable!(),
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_experiment_lists_valid_ids() {
        let err = lookup("nope").unwrap_err().to_string();
        for e in REGISTRY {
            assert!(err.contains(e.id), "{err}");
        }
    }

    #[test]
    fn toml_round_trip_keeps_hash() {
        let mut cfg = smoke_config("qv", 7).unwrap();
        cfg.tolerances.insert("se_multiple".into(), 2.5);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut moved = cfg.clone();
        moved.output_dir = Some("/elsewhere".into());
        assert_eq!(moved.hash(), cfg.hash());
        moved.seed += 1;
        assert_ne!(moved.hash(), cfg.hash());
    }

    #[test]
    fn schema_version_is_enforced() {
        let mut cfg = ExperimentConfig::new("brw", 1, 2);
        cfg.schema_version = 99;
        assert!(matches!(ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn failing_rows_are_recorded() {
        let mut cfg = ExperimentConfig::new("brw", 1, 3);
        // depth 30 exceeds the tree size limit on every replica
        cfg.params.insert("depth".into(), 30.0);
        let out = run_in_memory(&cfg).unwrap();
        assert_eq!(out.sidecar.failed_rows, 3);
        let text = String::from_utf8(out.csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().contains("too large"));
    }
}
