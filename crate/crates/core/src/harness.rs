//! Experiment configs, one runner per acceptance criterion, and reports.
//!
//! A config names a criterion, an experiment kind, model files (paths relative
//! to the config), sizes, replicate counts, a seed and a tolerance. Replicates
//! run on a rayon pool with the ChaCha stream given by (seed, replicate), and
//! results are aggregated in replicate order, so the report bytes depend only
//! on the config and seed.

use crate::census::{to_f64, Census};
use crate::frag::{absorption_time, map_params, simulate_marginal_tree, DiscretizedKernel, DislocationSpec};
use crate::growth::{
    build_brick_set, ell_weights, grow, reduce_growth_tree, root_brick_index, sample_root_split, truncated_growth_integral,
    urn_limit_sample, BrickSet, EllMode, GrowthKernel, GrowthSpec, UrnMode,
};
use crate::gw::{
    asymptotic_count_estimate, count_tables, count_tables_with_ceiling, extinct_conditioned_offspring, gw_splitting_kernel,
    kesten_bias, otter_dwass_table, sample_conditioned_gw, subcriticality_check, type_one_vertices, GWSpec, GwKernel,
};
use crate::mb::{sample_height, sample_mb_tree, tagged_absorption_time, tagged_transition_row, SampleOptions, SplittingKernel};
use crate::mb::{sample_discrete_marginal, DEFAULT_NODE_CAP, DEFAULT_STEP_CAP};
use crate::metrics::{chi_square_test, distance_matrix, ks_one_sample, ks_pvalue, ks_two_sample, mean_stderr, pairwise_sum};
use crate::partitions::{prokhorov_distance, rank_mass_partition, AtomicMeasure, DiscreteTypedPartition, Part};
use crate::rng::{derive_seed, replicates, SimRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

/// Overrides the configured thread count. Results never depend on it.
pub const THREADS_ENV: &str = "MBTREES_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: line {line}, column {column}: {msg}")]
    Config { path: String, line: usize, column: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Model { path: String, msg: String },
    #[error("{0}")]
    Run(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

macro_rules! run_error {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Run(e.to_string())
            }
        }
    )*};
}
run_error!(
    crate::gw::GwError,
    crate::growth::GrowthError,
    crate::frag::FragError,
    crate::mb::MbError,
    crate::mb::KernelError,
    crate::metrics::MetricsError,
    crate::partitions::PartitionError,
    rayon::ThreadPoolBuildError
);

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TaggedChain,
    GwLimit,
    TypeMixing,
    GrowthScaling,
    EllWeights,
    UrnLimit,
    MarginalCompare,
    KernelConvergence,
    ProkhorovProps,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multi-type offspring laws (`GWSpec::from_json`).
    Gw,
    /// Growth spec with T0 and a weighted alphabet.
    Growth,
    /// Dislocation measures (`DislocationSpec::from_json`).
    Dislocation,
    /// Discretized MB kernel with optional renaming (`DiscretizedKernel::from_json`).
    Discretized,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub kind: ModelKind,
    pub path: String,
    /// Height scaling exponent for this model, if it differs from the config's.
    #[serde(default)]
    pub gamma: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub criterion: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub models: Vec<ModelRef>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    pub tolerance: f64,
    #[serde(default)]
    pub params: Map<String, Value>,
    /// Directory that model paths are relative to.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Parses a config, reporting the line and column of any JSON or field error.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(HarnessError::Invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.replicates == 0 {
            return Err(HarnessError::Invalid("replicates must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(HarnessError::Invalid("threads must be at least 1".into()));
        }
        if self.n_grid.contains(&0) {
            return Err(HarnessError::Invalid("n_grid entries must be positive".into()));
        }
        for g in [self.gamma, self.beta].into_iter().flatten() {
            if !g.is_finite() || g < 0.0 {
                return Err(HarnessError::Invalid(format!("gamma and beta must be finite and nonnegative, got {g}")));
            }
        }
        Ok(())
    }

    fn id(&self, sub: &str) -> String {
        if sub.is_empty() {
            self.criterion.to_string()
        } else {
            format!("{}:{sub}", self.criterion)
        }
    }

    fn param_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| HarnessError::Invalid(format!("params.{key} must be a number"))),
        }
    }

    fn param_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|x| x as usize)
                .or_else(|| v.as_f64().filter(|x| *x >= 0.0 && x.fract() == 0.0).map(|x| x as usize))
                .ok_or_else(|| HarnessError::Invalid(format!("params.{key} must be a nonnegative integer"))),
        }
    }

    fn param_vec(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.params.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| HarnessError::Invalid(format!("params.{key}: {e}"))),
        }
    }

    fn n(&self, default: usize) -> usize {
        self.n_grid.first().copied().unwrap_or(default)
    }

    fn gamma(&self) -> Result<f64> {
        self.gamma.ok_or_else(|| HarnessError::Invalid("this experiment needs `gamma`".into()))
    }

    fn model(&self, idx: usize, kind: ModelKind) -> Result<&ModelRef> {
        let m = self
            .models
            .get(idx)
            .ok_or_else(|| HarnessError::Invalid(format!("model #{} is missing", idx + 1)))?;
        if m.kind != kind {
            return Err(HarnessError::Invalid(format!("model #{} must be of kind {kind:?}, got {:?}", idx + 1, m.kind)));
        }
        Ok(m)
    }

    fn resolve(&self, m: &ModelRef) -> PathBuf {
        self.base_dir.join(&m.path)
    }

    fn read_model(&self, m: &ModelRef) -> Result<(String, String)> {
        let p = self.resolve(m);
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::Io { path: p.display().to_string(), msg: e.to_string() })?;
        Ok((p.display().to_string(), text))
    }

    pub fn load_gw(&self, m: &ModelRef) -> Result<GWSpec> {
        let (path, text) = self.read_model(m)?;
        GWSpec::from_json(&text).map_err(|e| HarnessError::Model { path, msg: e.to_string() })
    }

    pub fn load_growth(&self, m: &ModelRef) -> Result<BrickSet> {
        let (path, text) = self.read_model(m)?;
        let spec = GrowthSpec::from_json(&text).map_err(|e| HarnessError::Model { path: path.clone(), msg: e.to_string() })?;
        build_brick_set(&spec).map_err(|e| HarnessError::Model { path, msg: e.to_string() })
    }

    pub fn load_dislocation(&self, m: &ModelRef) -> Result<DislocationSpec> {
        let (path, text) = self.read_model(m)?;
        DislocationSpec::from_json(&text).map_err(|e| HarnessError::Model { path, msg: e.to_string() })
    }

    pub fn load_discretized(&self, m: &ModelRef) -> Result<DiscretizedKernel> {
        let (path, text) = self.read_model(m)?;
        DiscretizedKernel::from_json(&text).map_err(|e| HarnessError::Model { path, msg: e.to_string() })
    }

    /// Any model as an MB kernel; GW tables are built up to `n_max`.
    pub fn load_kernel(&self, m: &ModelRef, n_max: usize) -> Result<Box<dyn SplittingKernel>> {
        Ok(match m.kind {
            ModelKind::Gw => Box::new(self.gw_kernel(m, n_max)?),
            ModelKind::Growth => Box::new(GrowthKernel { bricks: self.load_growth(m)? }),
            ModelKind::Dislocation => Box::new(DiscretizedKernel::from_spec(&self.load_dislocation(m)?)),
            ModelKind::Discretized => Box::new(self.load_discretized(m)?),
        })
    }

    fn gw_kernel(&self, m: &ModelRef, n_max: usize) -> Result<GwKernel> {
        let spec = Arc::new(self.load_gw(m)?);
        let ceiling = self.param_usize("ceiling", crate::gw::DEFAULT_N_MAX_CEILING)?;
        let table = Arc::new(count_tables_with_ceiling(&spec, n_max, ceiling)?);
        Ok(gw_splitting_kernel(spec, table)?)
    }
}

fn stem(m: &ModelRef) -> String {
    Path::new(&m.path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| m.path.clone())
}

/// One checked quantity.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Row {
    pub criterion_id: String,
    pub estimate: f64,
    pub stderr_or_stat: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Value the estimate is compared with, when there is one.
    #[serde(default)]
    pub reference: Option<f64>,
    #[serde(default)]
    pub detail: String,
}

/// Long-format point of an n-grid series.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SeriesPoint {
    pub criterion_id: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub stderr: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<Row>,
    #[serde(default)]
    pub series: Vec<SeriesPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Finite stand-in so JSON output stays parseable.
fn finite(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else if x.is_nan() {
        f64::MAX
    } else {
        x.signum() * f64::MAX
    }
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&Row> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
        self.series.extend(other.series);
    }

    fn push(&mut self, row: Row) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("criterion_id,estimate,stderr_or_stat,threshold,pass\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.criterion_id, r.estimate, r.stderr_or_stat, r.threshold, r.pass);
        }
        s
    }

    pub fn series_csv(&self) -> String {
        let mut s = String::from("criterion_id,series,x,y,stderr\n");
        for p in &self.series {
            let _ = writeln!(s, "{},{},{},{},{}", p.criterion_id, p.series, p.x, p.y, p.stderr);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One line per row.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let verdict = if r.pass { "PASS" } else { "FAIL" };
            let _ = write!(
                s,
                "{verdict} {} estimate={} stat={} threshold={}",
                r.criterion_id,
                short(r.estimate),
                short(r.stderr_or_stat),
                r.threshold
            );
            if let Some(x) = r.reference {
                let _ = write!(s, " reference={}", short(x));
            }
            if !r.detail.is_empty() {
                let _ = write!(s, " ({})", r.detail);
            }
            s.push('\n');
        }
        s
    }
}

fn short(x: f64) -> String {
    if x == 0.0 || (1e-3..1e6).contains(&x.abs()) {
        format!("{x:.6}")
    } else {
        format!("{x:.3e}")
    }
}

/// Writes the report; a non-empty series goes next to it as `<stem>_series.csv`.
pub fn emit_report(r: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    let io = |e: std::io::Error, p: &Path| HarnessError::Io { path: p.display().to_string(), msg: e.to_string() };
    let body = match format {
        ReportFormat::Csv => r.to_csv(),
        ReportFormat::Json => r.to_json(),
    };
    std::fs::write(path, body).map_err(|e| io(e, path))?;
    if !r.series.is_empty() {
        let name = format!("{}_series.csv", path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let sp = path.with_file_name(name);
        std::fs::write(&sp, r.series_csv()).map_err(|e| io(e, &sp))?;
    }
    Ok(())
}

/// Thread count: environment override, then config, then rayon's default.
pub fn thread_count(cfg: &ExperimentConfig) -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&t: &usize| t > 0).or(cfg.threads)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = thread_count(cfg) {
        builder = builder.num_threads(t);
    }
    let pool = builder.build()?;
    pool.install(|| dispatch(cfg))
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Report> {
    let variant = cfg.variant.as_deref().unwrap_or("");
    match cfg.kind {
        ExperimentKind::GwLimit => match variant {
            "kernel_census" => kernel_census(cfg),
            "otter_dwass" => otter_dwass(cfg),
            "local_limit" => local_limit(cfg),
            "crt_ratio" => crt_ratio(cfg),
            v => Err(HarnessError::Invalid(format!(
                "gw_limit variant must be kernel_census, otter_dwass, local_limit or crt_ratio, got {v:?}"
            ))),
        },
        ExperimentKind::TaggedChain => tagged_chain(cfg),
        ExperimentKind::TypeMixing => type_mixing(cfg),
        ExperimentKind::UrnLimit => urn_limit(cfg),
        ExperimentKind::EllWeights => ell_check(cfg),
        ExperimentKind::KernelConvergence => kernel_convergence(cfg),
        ExperimentKind::MarginalCompare => marginal_compare(cfg),
        ExperimentKind::GrowthScaling => height_moments(cfg),
        ExperimentKind::ProkhorovProps => property_batch(cfg),
    }
}

fn below(id: String, estimate: f64, stat: f64, threshold: f64, detail: String) -> Row {
    Row { criterion_id: id, estimate: finite(estimate), stderr_or_stat: finite(stat), threshold, pass: estimate <= threshold, reference: None, detail }
}

/// Passes when |estimate/reference − 1| ≤ tol.
fn relative(id: String, estimate: f64, se: f64, reference: f64, tol: f64, detail: String) -> Row {
    let dev = (estimate / reference - 1.0).abs();
    Row {
        criterion_id: id,
        estimate: finite(estimate),
        stderr_or_stat: finite(se),
        threshold: tol,
        pass: dev <= tol,
        reference: Some(reference),
        detail: format!("relative deviation {dev:.4}{}{detail}", if detail.is_empty() { "" } else { "; " }),
    }
}

fn unit(len: usize, p: usize) -> Vec<u32> {
    let mut z = vec![0u32; len];
    z[0] = p as u32;
    z
}

fn kernel_census(cfg: &ExperimentConfig) -> Result<Report> {
    let m = cfg.model(0, ModelKind::Gw)?;
    let spec = Arc::new(cfg.load_gw(m)?);
    let grid: Vec<usize> = if cfg.n_grid.is_empty() { (1..=12).collect() } else { cfg.n_grid.clone() };
    let n_max = *grid.iter().max().unwrap();
    let census = Census::new(&spec, n_max)?;
    let table = Arc::new(count_tables(&spec, n_max)?);
    let kernel = gw_splitting_kernel(spec.clone(), table.clone())?;
    let (mut law_diff, mut count_diff, mut cells) = (0.0f64, 0.0f64, 0usize);
    for &n in &grid {
        for i in 1..=spec.kappa() {
            let exact = census.tree_prob(i, n);
            count_diff = count_diff.max((to_f64(exact) - table.tree_prob(i, n)).abs());
            if exact == &num_rational::BigRational::from_integer(0.into()) {
                continue;
            }
            let law = census.kernel_law(n, i);
            let mut numeric: BTreeMap<DiscreteTypedPartition, f64> = BTreeMap::new();
            for (p, w) in kernel.support(n, i).ok_or_else(|| HarnessError::Run(format!("kernel support missing at n={n}, i={i}")))? {
                *numeric.entry(p).or_insert(0.0) += w;
            }
            for (p, q) in &law {
                law_diff = law_diff.max((to_f64(q) - numeric.get(p).copied().unwrap_or(0.0)).abs());
                cells += 1;
            }
            for (p, w) in &numeric {
                if !law.contains_key(p) {
                    law_diff = law_diff.max(w.abs());
                    cells += 1;
                }
            }
        }
    }
    let mut r = Report::default();
    r.push(below(cfg.id("kernel_law"), law_diff, cells as f64, cfg.tolerance, format!("max |kernel − census| over {cells} partitions, n ≤ {n_max}")));
    r.push(below(cfg.id("tree_counts"), count_diff, grid.len() as f64, cfg.tolerance, "max |DP − census| of P(#1 T = n)".into()));
    Ok(r)
}

fn otter_dwass(cfg: &ExperimentConfig) -> Result<Report> {
    let p_max = cfg.param_usize("p_max", 5)?;
    let n_max = cfg.n(200);
    let mut r = Report::default();
    for m in &cfg.models {
        let m = if m.kind == ModelKind::Gw { m } else { return Err(HarnessError::Invalid("otter_dwass takes gw models".into())) };
        let spec = cfg.load_gw(m)?;
        let table = count_tables(&spec, n_max)?;
        let rows = otter_dwass_table(&spec, &table, p_max, n_max)?;
        let diff = rows.iter().map(|x| (x.2 - x.3).abs()).fold(0.0, f64::max);
        r.push(below(cfg.id(&stem(m)), diff, rows.len() as f64, cfg.tolerance, format!("max |forest − walk| for p ≤ {p_max}, n ≤ {n_max}")));
    }
    Ok(r)
}

fn local_limit(cfg: &ExperimentConfig) -> Result<Report> {
    let m = cfg.model(0, ModelKind::Gw)?;
    let spec = cfg.load_gw(m)?;
    let n = cfg.n(2000);
    let table = count_tables(&spec, n)?;
    if let Some((off, span)) = table.lattice(1) {
        if span > 1 && (n < off || !(n - off).is_multiple_of(span)) {
            return Err(HarnessError::Invalid(format!("n = {n} is off the lattice {off} + {span}ℕ")));
        }
    }
    let pd = spec.perron();
    let mut r = Report::default();
    for p in 1..=cfg.param_usize("z_max", 3)? {
        let z = unit(spec.kappa(), p);
        let ratio = table.forest_prob(&z, n) / asymptotic_count_estimate(pd, &z, n);
        r.push(relative(cfg.id(&format!("z={p}")), ratio, 0.0, 1.0, cfg.tolerance, format!("exact/asymptotic at n={n}")));
    }
    Ok(r)
}

/// Depth of a uniform type-1 vertex over √n, one value per tree.
fn uniform_depths(kernel: &GwKernel, n: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    let out = replicates(seed, reps, |_, rng| -> Result<f64> {
        let t = sample_conditioned_gw(kernel, n, 1, rng, false)?;
        let ones = type_one_vertices(&t);
        let v = ones[rng.random_range(0..ones.len())];
        Ok(t.node(v).depth as f64 / (n as f64).sqrt())
    });
    out.into_iter().collect()
}

fn crt_ratio(cfg: &ExperimentConfig) -> Result<Report> {
    let n = cfg.n(2000);
    let mut stats = Vec::new();
    for (k, idx) in [0usize, 1].iter().enumerate() {
        let m = cfg.model(*idx, ModelKind::Gw)?;
        let kernel = cfg.gw_kernel(m, n)?;
        let pd = kernel.spec().perron().clone();
        let d = uniform_depths(&kernel, n, cfg.replicates, derive_seed(cfg.seed, k as u64))?;
        let (mean, se) = mean_stderr(&d);
        stats.push((mean, se, pd.sigma() * pd.a[0].sqrt(), stem(m)));
    }
    let (a, b) = (&stats[0], &stats[1]);
    let ratio = a.0 / b.0;
    let se = ratio * ((a.1 / a.0).powi(2) + (b.1 / b.0).powi(2)).sqrt();
    let target = b.2 / a.2;
    let mut r = Report::default();
    r.push(relative(
        cfg.id("depth_ratio"),
        ratio,
        se,
        target,
        cfg.tolerance,
        format!("E[depth]/√n: {} {:.4}, {} {:.4}", a.3, a.0, b.3, b.0),
    ));
    Ok(r)
}

fn tagged_chain(cfg: &ExperimentConfig) -> Result<Report> {
    let n = cfg.n(15);
    let i = cfg.param_usize("type", 1)?;
    let kernel = cfg.load_kernel(&cfg.models.first().cloned().ok_or_else(|| HarnessError::Invalid("a model is required".into()))?, n)?;
    if n < 2 {
        return Err(HarnessError::Invalid("tagged_chain needs n ≥ 2".into()));
    }
    let row = tagged_transition_row(&kernel, n, i)?;
    let keys: Vec<(usize, usize)> = row.keys().copied().collect();
    let expected: Vec<f64> = row.values().copied().collect();
    let opts = SampleOptions { node_cap: DEFAULT_NODE_CAP, expand_zero: true, label_leaves: true };
    let draws = replicates(cfg.seed, cfg.replicates, |_, rng| -> Result<(usize, usize)> {
        let t = sample_mb_tree(&kernel, n, i, rng, &opts)?;
        let mut v = t.labeled_node(1).ok_or_else(|| HarnessError::Run("leaf 1 missing".into()))?;
        while t.node(v).depth > 1 {
            v = t.parent(v).expect("non-root has a parent");
        }
        Ok((t.node(v).size, t.node(v).ty))
    });
    let mut observed = vec![0u64; keys.len()];
    let mut impossible = 0u64;
    for d in draws {
        match keys.binary_search(&d?) {
            Ok(k) => observed[k] += 1,
            Err(_) => impossible += 1,
        }
    }
    let chi = chi_square_test(&observed, &expected, cfg.param_f64("min_expected", 5.0)?)?;
    let mut r = Report::default();
    r.push(Row {
        criterion_id: cfg.id("chi_square"),
        estimate: chi.p_value,
        stderr_or_stat: chi.statistic,
        threshold: cfg.tolerance,
        pass: chi.p_value > cfg.tolerance && impossible == 0,
        reference: None,
        detail: format!("p-value, {} dof, {} cells, {impossible} draws outside the support", chi.dof, keys.len()),
    });
    Ok(r)
}

fn type_mixing(cfg: &ExperimentConfig) -> Result<Report> {
    let m = cfg.model(0, ModelKind::Gw)?;
    let n = cfg.n(2000);
    let kernel = cfg.gw_kernel(m, n)?;
    let kappa = kernel.spec().kappa();
    let chi = kernel.spec().perron().chi.clone();
    let per_tree = replicates(cfg.seed, cfg.replicates, |_, rng| -> Result<Vec<u64>> {
        let t = sample_conditioned_gw(&kernel, n, 1, rng, false)?;
        let ones = type_one_vertices(&t);
        let v = ones[rng.random_range(0..ones.len())];
        let mut counts = vec![0u64; kappa];
        let mut u = t.parent(v);
        while let Some(x) = u {
            if x == 0 {
                break;
            }
            counts[t.node(x).ty - 1] += 1;
            u = t.parent(x);
        }
        Ok(counts)
    });
    let per_tree: Vec<Vec<u64>> = per_tree.into_iter().collect::<Result<_>>()?;
    let lens: Vec<f64> = per_tree.iter().map(|c| c.iter().sum::<u64>() as f64).collect();
    let total = pairwise_sum(&lens);
    let mut r = Report::default();
    for j in 0..kappa {
        let cj: Vec<f64> = per_tree.iter().map(|c| c[j] as f64).collect();
        let f = pairwise_sum(&cj) / total;
        let dev: Vec<f64> = cj.iter().zip(&lens).map(|(c, l)| (c - f * l).powi(2)).collect();
        let se = pairwise_sum(&dev).sqrt() / total;
        let diff = (f - chi[j]).abs();
        r.push(Row {
            criterion_id: cfg.id(&format!("type{}", j + 1)),
            estimate: f,
            stderr_or_stat: se,
            threshold: cfg.tolerance,
            pass: diff <= cfg.tolerance,
            reference: Some(chi[j]),
            detail: format!("pooled frequency along {} path vertices, |diff| {diff:.4}", total as u64),
        });
    }
    Ok(r)
}

fn urn_limit(cfg: &ExperimentConfig) -> Result<Report> {
    let steps = cfg.param_usize("steps", 10_000)?;
    let weights = cfg.param_vec("weights", &[1.0, 1.0])?;
    let inc = cfg.param_f64("increment", 1.0)?;
    let first = replicates(derive_seed(cfg.seed, 0), cfg.replicates, |_, rng| urn_limit_sample(&weights, &[(inc, 1.0)], steps, rng)[0]);
    let d = ks_one_sample(&first, |x| x.clamp(0.0, 1.0))?;
    let mut r = Report::default();
    r.push(below(
        cfg.id("polya_ks"),
        d,
        ks_pvalue(d, first.len() as f64),
        cfg.tolerance,
        format!("KS of the first limit coordinate vs Uniform(0,1), {} urns of {steps} steps", first.len()),
    ));
    if !cfg.models.is_empty() {
        let bricks = cfg.load_growth(cfg.model(0, ModelKind::Growth)?)?;
        let law = bricks.increment_law();
        let w = cfg.param_vec("random_weights", &[1.0, 2.0, 3.0])?;
        let reps = cfg.param_usize("random_replicates", 1000)?;
        let limits = replicates(derive_seed(cfg.seed, 1), reps, |_, rng| urn_limit_sample(&w, &law, steps, rng));
        let bad = limits
            .iter()
            .filter(|x| x.iter().any(|v| *v <= 0.0) || (0..x.len()).any(|a| (a + 1..x.len()).any(|b| x[a] == x[b])))
            .count();
        let gap = limits
            .iter()
            .map(|x| {
                let mut s = x.clone();
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                s.windows(2).map(|p| p[1] - p[0]).fold(s[0], f64::min)
            })
            .fold(f64::INFINITY, f64::min);
        r.push(Row {
            criterion_id: cfg.id("random_increment"),
            estimate: bad as f64,
            stderr_or_stat: finite(gap),
            threshold: 0.0,
            pass: bad == 0,
            reference: None,
            detail: format!("replicates with a zero or repeated coordinate out of {reps}; stat is the smallest coordinate or gap seen"),
        });
    }
    Ok(r)
}

fn ell_check(cfg: &ExperimentConfig) -> Result<Report> {
    let m = cfg.model(0, ModelKind::Growth)?;
    let bricks = cfg.load_growth(m)?;
    let n = cfg.n(10_000);
    let i = cfg.param_usize("type", 1)?;
    let ks: Vec<usize> = cfg.param_vec("k", &[1.0, 2.0, 3.0])?.iter().map(|&k| k as usize).collect();
    let gamma = cfg.gamma()?;
    let k_max = *ks.iter().max().unwrap_or(&0);
    let mode = match cfg.params.get("ell_mode").and_then(Value::as_str) {
        Some("monte_carlo") => EllMode::MonteCarlo { n: cfg.param_usize("ell_n", n)?, paths: cfg.param_usize("ell_paths", 10_000)? },
        _ => EllMode::ClosedForm,
    };
    let mut rng: SimRng = crate::rng::stream(derive_seed(cfg.seed, 1), 0);
    let ells = ell_weights(&bricks, i, k_max, mode, &mut rng)?;
    let js = replicates(cfg.seed, cfg.replicates, |_, rng| root_brick_index(&bricks, i, n, rng));
    let js: Vec<usize> = js.into_iter().collect::<std::result::Result<_, _>>()?;
    let scale = (n as f64).powf(gamma);
    let reps = js.len() as f64;
    let mut r = Report::default();
    for &k in &ks {
        let p = js.iter().filter(|&&j| j == k).count() as f64 / reps;
        let est = scale * p;
        let se = scale * (p * (1.0 - p) / reps).sqrt();
        r.push(relative(cfg.id(&format!("k={k}")), est, se, ells[k], cfg.tolerance, format!("n^γ·P(J_n = k) at n={n}")));
        r.series.push(SeriesPoint { criterion_id: cfg.id("ell"), series: "empirical".into(), x: k as f64, y: est, stderr: se });
        r.series.push(SeriesPoint { criterion_id: cfg.id("ell"), series: "closed_form".into(), x: k as f64, y: ells[k], stderr: 0.0 });
    }
    Ok(r)
}

fn kernel_convergence(cfg: &ExperimentConfig) -> Result<Report> {
    let m = cfg.model(0, ModelKind::Growth)?;
    let bricks = cfg.load_growth(m)?;
    let n = cfg.n(10_000);
    let i = cfg.param_usize("type", 1)?;
    let gamma = cfg.gamma()?;
    let k_max = cfg.param_usize("k_max", 50)?;
    let samples = cfg.param_usize("component_samples", 20_000)?;
    let mode = match bricks.common_edges() {
        Some(_) if cfg.params.get("urn_steps").is_none() => UrnMode::Dirichlet,
        _ => UrnMode::Simulate(cfg.param_usize("urn_steps", crate::growth::DEFAULT_URN_STEPS)?),
    };
    let ell_mode = if bricks.common_edges().is_some() {
        EllMode::ClosedForm
    } else {
        EllMode::MonteCarlo { n, paths: cfg.param_usize("ell_paths", 10_000)? }
    };
    let vals = replicates(cfg.seed, cfg.replicates, |_, rng| -> Result<f64> {
        let (p, _) = sample_root_split(&bricks, i, n, rng)?;
        let first = p.parts()[0];
        Ok(1.0 - if first.ty == i { first.size as f64 / n as f64 } else { 0.0 })
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let (mean, se) = mean_stderr(&vals);
    let scale = (n as f64).powf(gamma);
    let mut rng = crate::rng::stream(derive_seed(cfg.seed, 1), 0);
    let ells = ell_weights(&bricks, i, k_max, ell_mode, &mut rng)?;
    let limit = truncated_growth_integral(&bricks, i, &ells, &|_| 1.0, mode, samples, &mut rng)?;
    let est = scale * mean;
    let se_ratio = (est / limit.mean) * ((scale * se / est).powi(2) + (limit.stderr / limit.mean).powi(2)).sqrt();
    let mut r = Report::default();
    r.push(relative(
        cfg.id("one_minus_s1"),
        est,
        scale * se,
        limit.mean,
        cfg.tolerance,
        format!("truncated limit ± {:.4}, ratio stderr {se_ratio:.4}, K={k_max}", limit.stderr),
    ));
    Ok(r)
}

fn marginal_compare(cfg: &ExperimentConfig) -> Result<Report> {
    let m = cfg.model(0, ModelKind::Dislocation)?;
    let d = cfg.load_dislocation(m)?;
    let kernel = DiscretizedKernel::from_spec(&d);
    let map = map_params(&d);
    let n = cfg.n(2000);
    let i = cfg.param_usize("type", 1)?;
    let eps = cfg.param_f64("eps", 1e-12)?;
    let gamma = cfg.gamma()?;
    let scale = (n as f64).powf(gamma);
    let reps = cfg.replicates;
    let d1_disc: Vec<f64> = replicates(derive_seed(cfg.seed, 0), reps, |_, rng| tagged_absorption_time(&kernel, n, i, rng, DEFAULT_STEP_CAP))
        .into_iter()
        .map(|x| x.map(|h| h as f64 / scale))
        .collect::<std::result::Result<_, _>>()?;
    let d1_cont: Vec<f64> = replicates(derive_seed(cfg.seed, 1), reps, |_, rng| absorption_time(&map, i, d.gamma(), eps, rng))
        .into_iter()
        .map(|x| x.map(|p| p.d1()))
        .collect::<std::result::Result<_, _>>()?;
    let d2_disc: Vec<f64> = replicates(derive_seed(cfg.seed, 2), reps, |_, rng| -> Result<f64> {
        let t = sample_discrete_marginal(&kernel, n, i, 2, rng, DEFAULT_STEP_CAP)?;
        t.split_height(1, 2).map(|h| h / scale).ok_or_else(|| HarnessError::Run("labels missing from marginal".into()))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let d2_cont: Vec<f64> = replicates(derive_seed(cfg.seed, 3), reps, |_, rng| -> Result<f64> {
        let t = simulate_marginal_tree(&d, i, 2, rng)?;
        t.split_height(1, 2).ok_or_else(|| HarnessError::Run("labels missing from marginal".into()))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut r = Report::default();
    let eff = (reps as f64) / 2.0;
    for (name, a, b) in [("d1", &d1_disc, &d1_cont), ("d2", &d2_disc, &d2_cont)] {
        let ks = ks_two_sample(a, b)?;
        let (ma, _) = mean_stderr(a);
        let (mb, _) = mean_stderr(b);
        r.push(below(cfg.id(name), ks, ks_pvalue(ks, eff), cfg.tolerance, format!("two-sample KS at n={n}; means {ma:.4} discrete, {mb:.4} continuum")));
    }
    Ok(r)
}

type HeightSampler = Box<dyn Fn(usize, &mut SimRng) -> Result<usize> + Sync>;

fn height_moments(cfg: &ExperimentConfig) -> Result<Report> {
    let grid: Vec<usize> = if cfg.n_grid.is_empty() { (7..=13).map(|e| 1usize << e).collect() } else { cfg.n_grid.clone() };
    let n_max = *grid.iter().max().unwrap();
    let i = cfg.param_usize("type", 1)?;
    let mut r = Report::default();
    for (mi, m) in cfg.models.iter().enumerate() {
        let gamma = m.gamma.or(cfg.gamma).ok_or_else(|| HarnessError::Invalid(format!("model {} needs gamma", m.path)))?;
        let name = stem(m);
        let sampler: HeightSampler = match m.kind {
            ModelKind::Growth => {
                let bricks = cfg.load_growth(m)?;
                Box::new(move |n, rng| Ok(reduce_growth_tree(&grow(&bricks, i, n, rng)?).height()))
            }
            ModelKind::Gw => {
                let kernel = cfg.gw_kernel(m, n_max)?;
                Box::new(move |n, rng| Ok(sample_height(&kernel, n, i, rng, true, DEFAULT_NODE_CAP)?))
            }
            _ => {
                let kernel = cfg.load_kernel(m, n_max)?;
                Box::new(move |n, rng| Ok(sample_height(&kernel, n, i, rng, false, DEFAULT_NODE_CAP)?))
            }
        };
        let mut means = Vec::new();
        for (gi, &n) in grid.iter().enumerate() {
            let seed = derive_seed(cfg.seed, (mi as u64) << 32 | gi as u64);
            let h: Vec<f64> = replicates(seed, cfg.replicates, |_, rng| sampler(n, rng).map(|h| h as f64))
                .into_iter()
                .collect::<Result<_>>()?;
            let scale = (n as f64).powf(gamma);
            let (mean, se) = mean_stderr(&h);
            means.push(mean / scale);
            r.series.push(SeriesPoint { criterion_id: cfg.id("height"), series: name.clone(), x: n as f64, y: mean / scale, stderr: se / scale });
        }
        let hi = means.iter().cloned().fold(f64::MIN, f64::max);
        let lo = means.iter().cloned().fold(f64::MAX, f64::min);
        let ratio = hi / lo;
        r.push(Row {
            criterion_id: cfg.id(&name),
            estimate: ratio,
            stderr_or_stat: lo,
            threshold: cfg.tolerance,
            pass: ratio < cfg.tolerance,
            reference: None,
            detail: format!("max/min of E[H_n]/n^{gamma} over n ∈ {grid:?}; stat is the minimum"),
        });
    }
    Ok(r)
}

/// Single-sample verbs of the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleVerb {
    /// An MB tree from any model's kernel, as a tree dump.
    Sim,
    /// A conditioned GW tree with its extinct subtrees, as a tree dump.
    Gw,
    /// A reduced growth tree, as a tree dump.
    Growth,
    /// A k-leaf fragmentation marginal, as a distance-matrix CSV.
    Frag,
}

/// Draws one sample for `verb` from stream 0 of the config seed.
pub fn sample_output(cfg: &ExperimentConfig, verb: SampleVerb) -> Result<String> {
    let n = cfg.n_grid.first().copied().ok_or_else(|| HarnessError::Invalid("n_grid must give the size".into()))?;
    let i = cfg.param_usize("type", 1)?;
    let mut rng = crate::rng::stream(cfg.seed, 0);
    Ok(match verb {
        SampleVerb::Sim => {
            let m = cfg.models.first().ok_or_else(|| HarnessError::Invalid("a model is required".into()))?;
            let kernel = cfg.load_kernel(m, n)?;
            sample_mb_tree(&kernel, n, i, &mut rng, &SampleOptions::default())?.to_dump()
        }
        SampleVerb::Gw => {
            let kernel = cfg.gw_kernel(cfg.model(0, ModelKind::Gw)?, n)?;
            sample_conditioned_gw(&kernel, n, i, &mut rng, true)?.to_dump()
        }
        SampleVerb::Growth => {
            let bricks = cfg.load_growth(cfg.model(0, ModelKind::Growth)?)?;
            reduce_growth_tree(&grow(&bricks, i, n, &mut rng)?).to_dump()
        }
        SampleVerb::Frag => {
            let d = cfg.load_dislocation(cfg.model(0, ModelKind::Dislocation)?)?;
            let t = simulate_marginal_tree(&d, i, n, &mut rng)?;
            distance_matrix(&t, None)?.to_csv()
        }
    })
}

fn random_measure(atoms: usize, dim: usize, rng: &mut SimRng) -> AtomicMeasure {
    let w: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = w.iter().sum();
    AtomicMeasure::new(w.iter().map(|x| ((0..dim).map(|_| rng.random::<f64>()).collect(), x / s)).collect())
}

fn property_batch(cfg: &ExperimentConfig) -> Result<Report> {
    let reps = cfg.replicates;
    let tol = cfg.tolerance;
    let ptol = cfg.param_f64("prokhorov_tol", 1e-9)?;
    let mut r = Report::default();

    // Prokhorov axioms on random measures with at most 8 atoms
    let viol = replicates(derive_seed(cfg.seed, 0), reps, |_, rng| -> Result<f64> {
        let sizes: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
        let (a, b, c) = (random_measure(sizes[0], 2, rng), random_measure(sizes[1], 2, rng), random_measure(sizes[2], 2, rng));
        let ab = prokhorov_distance(&a, &b)?;
        let ba = prokhorov_distance(&b, &a)?;
        let ac = prokhorov_distance(&a, &c)?;
        let bc = prokhorov_distance(&b, &c)?;
        let aa = prokhorov_distance(&a, &a)?;
        let mut v = aa.abs().max((ab - ba).abs()).max(ac - ab - bc).max(0.0);
        if ab <= 0.0 {
            v = v.max(1.0);
        }
        Ok(v)
    });
    let viol: Vec<f64> = viol.into_iter().collect::<Result<_>>()?;
    let worst = viol.iter().cloned().fold(0.0, f64::max);
    r.push(below(cfg.id("prokhorov_axioms"), worst, reps as f64, ptol, "identity, symmetry, triangle and separation on random 1-8 atom measures".into()));

    // ranking is idempotent
    let bad = replicates(derive_seed(cfg.seed, 1), reps, |_, rng| -> Result<bool> {
        let k = rng.random_range(1..=8);
        let mut atoms: Vec<(f64, usize)> = (0..k).map(|_| (rng.random::<f64>(), rng.random_range(1..=3))).collect();
        let s: f64 = atoms.iter().map(|a| a.0).sum::<f64>() * (1.0 + rng.random::<f64>());
        atoms.iter_mut().for_each(|a| a.0 /= s);
        let once = rank_mass_partition(atoms)?;
        let twice = rank_mass_partition(once.atoms().to_vec())?;
        let total = rng.random_range(k..=4 * k);
        let parts: Vec<Part> = (0..k).map(|_| Part::new(rng.random_range(1..=total / k), rng.random_range(1..=3))).collect();
        let p1 = DiscreteTypedPartition::ranked(parts, total, false)?;
        let p2 = DiscreteTypedPartition::ranked(p1.parts().to_vec(), total, false)?;
        Ok(once != twice || p1 != p2)
    });
    let bad = bad.into_iter().collect::<Result<Vec<bool>>>()?.iter().filter(|b| **b).count();
    r.push(below(cfg.id("rank_idempotence"), bad as f64, reps as f64, 0.0, "failures among random mass and discrete partitions".into()));

    let gw_models: Vec<&ModelRef> = cfg.models.iter().filter(|m| m.kind == ModelKind::Gw).collect();
    let frag_model = cfg.models.iter().find(|m| m.kind == ModelKind::Dislocation);

    // four-point condition on sampled trees
    let mut fp_fail = 0usize;
    let mut fp_total = 0usize;
    let tree_n = cfg.param_usize("tree_n", 30)?;
    if let Some(m) = gw_models.first() {
        let kernel = cfg.gw_kernel(m, tree_n)?;
        let opts = SampleOptions { node_cap: DEFAULT_NODE_CAP, expand_zero: false, label_leaves: true };
        let res = replicates(derive_seed(cfg.seed, 2), reps, |_, rng| -> Result<bool> {
            let t = sample_mb_tree(&kernel, tree_n, 1, rng, &opts)?;
            Ok(distance_matrix(&t, None)?.four_point_holds(1e-9))
        });
        for x in res {
            fp_total += 1;
            fp_fail += usize::from(!x?);
        }
    }
    if let Some(m) = frag_model {
        let d = cfg.load_dislocation(m)?;
        let leaves = cfg.param_usize("marginal_leaves", 6)?;
        let res = replicates(derive_seed(cfg.seed, 3), reps, |_, rng| -> Result<bool> {
            let t = simulate_marginal_tree(&d, 1, leaves, rng)?;
            Ok(distance_matrix(&t, None)?.four_point_holds(1e-9))
        });
        for x in res {
            fp_total += 1;
            fp_fail += usize::from(!x?);
        }
    }
    r.push(below(cfg.id("four_point"), fp_fail as f64, fp_total as f64, 0.0, "violations among sampled MB and fragmentation marginal trees".into()));

    // size-biased and extinction-conditioned laws are probability laws
    let mut kesten = 0.0f64;
    let mut zeta = 0.0f64;
    for m in &gw_models {
        let spec = cfg.load_gw(m)?;
        for law in kesten_bias(&spec) {
            kesten = kesten.max((law.iter().map(|x| x.1).sum::<f64>() - 1.0).abs());
        }
        for law in extinct_conditioned_offspring(&spec)?.laws.into_iter().flatten() {
            zeta = zeta.max((law.iter().map(|x| x.1).sum::<f64>() - 1.0).abs());
        }
    }
    r.push(below(cfg.id("kesten_normalization"), kesten, gw_models.len() as f64, tol, "max |Σ size-biased law − 1|".into()));
    r.push(below(cfg.id("extinct_normalization"), zeta, gw_models.len() as f64, tol, "max |Σ extinction-conditioned law − 1|".into()));

    if let Some(m) = gw_models.first() {
        let spec = cfg.load_gw(m)?;
        let (radius, sub) = subcriticality_check(&extinct_conditioned_offspring(&spec)?);
        let want = cfg.param_f64("radius", 0.25)?;
        r.push(Row {
            criterion_id: cfg.id("subcritical_radius"),
            estimate: radius,
            stderr_or_stat: (radius - want).abs(),
            threshold: tol,
            pass: sub && (radius - want).abs() <= tol,
            reference: Some(want),
            detail: format!("spectral radius of the extinction-conditioned mean matrix of {}", stem(m)),
        });
    }

    if let Some(m) = frag_model {
        let d = cfg.load_dislocation(m)?;
        let p = map_params(&d);
        let mut diff = 0.0f64;
        for q in [0.0, 1.0, 2.0] {
            for i in 1..=d.kappa() {
                diff = diff.max((p.psi(i, q) - d.psi_direct(i, q)).abs());
                for j in 1..=d.kappa() {
                    if j != i {
                        diff = diff.max((p.switch_laplace(i, j, q) - d.switch_laplace_direct(i, j, q)).abs());
                    }
                }
            }
        }
        r.push(below(cfg.id("map_laplace"), diff, 3.0, tol, "MAP exponent and switch transforms vs direct sums at q = 0, 1, 2".into()));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        parse_config(text, "inline").unwrap()
    }

    #[test]
    fn parse_errors_carry_position() {
        let e = parse_config("{\n  \"criterion\": 7,\n  \"kind\": \"urn\"\n}", "x.json").unwrap_err();
        match e {
            HarnessError::Config { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let e = parse_config(r#"{"criterion":7,"kind":"urn_limit","seed":1,"tolerance":0.1,"bogus":1}"#, "x").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        assert!(parse_config(r#"{"criterion":7,"kind":"urn_limit","seed":1,"tolerance":0}"#, "x").is_err());
    }

    #[test]
    fn polya_urn_report_passes_and_is_deterministic() {
        let c = cfg(r#"{"criterion":7,"kind":"urn_limit","seed":5,"replicates":2000,"tolerance":0.05,"params":{"steps":2000}}"#);
        let a = run_experiment(&c).unwrap();
        assert!(a.all_pass(), "{}", a.summary());
        let mut c2 = c.clone();
        c2.threads = Some(1);
        let b = run_experiment(&c2).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(Report::default().to_csv(), "criterion_id,estimate,stderr_or_stat,threshold,pass\n");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = Report {
            rows: vec![Row {
                criterion_id: "3:z=1".into(),
                estimate: 0.1 + 0.2,
                stderr_or_stat: 1.0 / 3.0,
                threshold: 1e-12,
                pass: false,
                reference: Some(std::f64::consts::PI),
                detail: String::new(),
            }],
            series: vec![SeriesPoint { criterion_id: "11".into(), series: "a".into(), x: 128.0, y: 2.0f64.sqrt(), stderr: 1e-300 }],
        };
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        for line in r.to_csv().lines().skip(1) {
            let pass = line.rsplit(',').next().unwrap();
            assert!(pass == "true" || pass == "false");
        }
    }
}
