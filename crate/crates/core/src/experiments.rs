//! Experiment drivers: metric-vs-true-sparsity sweeps, sparse vs non-sparse
//! discrimination, the ablation grid, layer sweeps and embedding runs.
//!
//! Every cell owns a seed derived from the master seed and the cell id, so a
//! table does not depend on which other cells ran or in which order. Rows
//! are sorted before they are written.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_activations, read_metadata, write_atomic};
use crate::metrics::MetricReport;
use crate::model::{center, ActivationSet, SolverConfig, StepRule};
use crate::solver::{fit_fixed_lambda, fit_matrix, infer_coefficients, Source};
use crate::synth::{gen_gaussian, gen_heavy_tailed, gen_rademacher, gen_sparse_linear, normalize_for_loss, SynthConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Layer fits explaining less variance than this are flagged.
pub const LAYER_VARIANCE_THRESHOLD: f64 = 0.98;

/// Embedding fits explaining less variance than this are flagged.
pub const EMBEDDING_VARIANCE_THRESHOLD: f64 = 0.90;

pub const METRIC_NONZERO: &str = "nonzero_entries";
pub const METRIC_FINAL_LOSS: &str = "final_loss";
pub const METRIC_AVG_COEFF_NORM: &str = "avg_coeff_norm";
pub const METRIC_NORMALIZED_LOSS: &str = "normalized_loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sweep,
    Discriminate,
    Ablation,
    Layers,
    Embeddings,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Discriminate => "discriminate",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::Layers => "layers",
            ExperimentKind::Embeddings => "embeddings",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Problem size presets for the synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// d = 64, n = 8192.
    Desk,
    /// d = 256, n = 16384.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?} (expected desk or full)"))),
        }
    }
}

/// One axis of the ablation grid. Each is applied on its own to the base
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    DictFactor(usize),
    Sigma(f64),
    Dim(usize),
    GroundTruthFactor(usize),
}

impl AblationAxis {
    /// Default axes: 16d dictionary, σ of 0.05 and 0.2, d of 64 and
    /// 512, and 8d ground-truth features.
    pub fn defaults() -> Vec<AblationAxis> {
        vec![
            AblationAxis::DictFactor(16),
            AblationAxis::Sigma(0.05),
            AblationAxis::Sigma(0.2),
            AblationAxis::Dim(64),
            AblationAxis::Dim(512),
            AblationAxis::GroundTruthFactor(8),
        ]
    }

    pub fn name(&self) -> String {
        match self {
            AblationAxis::DictFactor(k) => format!("dict_{k}d"),
            AblationAxis::Sigma(s) => format!("sigma_{s}"),
            AblationAxis::Dim(d) => format!("d_{d}"),
            AblationAxis::GroundTruthFactor(k) => format!("m_true_{k}d"),
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        match *self {
            AblationAxis::DictFactor(k) => cfg.solver.dict_factor = k,
            AblationAxis::Sigma(s) => cfg.sigma = s,
            AblationAxis::Dim(d) => cfg.d = d,
            AblationAxis::GroundTruthFactor(k) => cfg.m_true_factor = k,
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown ablation axis {s:?}"));
        let factor = |t: &str| t.strip_suffix('d').and_then(|k| k.parse().ok()).ok_or_else(bad);
        if let Some(rest) = s.strip_prefix("dict_") {
            Ok(AblationAxis::DictFactor(factor(rest)?))
        } else if let Some(rest) = s.strip_prefix("m_true_") {
            Ok(AblationAxis::GroundTruthFactor(factor(rest)?))
        } else if let Some(rest) = s.strip_prefix("sigma_") {
            rest.parse().map(AblationAxis::Sigma).map_err(|_| bad())
        } else if let Some(rest) = s.strip_prefix("d_") {
            rest.parse().map(AblationAxis::Dim).map_err(|_| bad())
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Expected active-feature counts for the sweep.
    pub a_grid: Vec<f64>,
    /// Expected active-feature counts of the sparse datasets in discrimination.
    pub sparse_a: Vec<f64>,
    /// Activation files for layer and embedding runs.
    pub datasets: Vec<PathBuf>,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    /// Ground-truth features as a multiple of `d`.
    pub m_true_factor: usize,
    pub ablation_axes: Vec<AblationAxis>,
    /// Also run discrimination on every ablation axis.
    pub ablation_discrimination: bool,
    pub solver: SolverConfig,
    /// λ the layer fits are trained with.
    pub fit_lambda: f64,
    /// λ used to decompose layer activations after training. Defaults to `fit_lambda`.
    pub inference_lambda: Option<f64>,
    /// Exponent of the average coefficient norm.
    pub p: f64,
    /// Output stem; `.csv` and `.json` are appended.
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, profile: Profile) -> Self {
        let (d, n) = match profile {
            Profile::Desk => (64, 8192),
            Profile::Full => (256, 16384),
        };
        let mut solver = SolverConfig {
            adapt_lambda: true,
            ..SolverConfig::default()
        };
        if kind == ExperimentKind::Layers {
            solver.dict_factor = 16;
            solver.adapt_lambda = false;
        }
        Self {
            kind,
            a_grid: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            sparse_a: vec![5.0, 10.0, 20.0],
            datasets: Vec::new(),
            d,
            n,
            sigma: 0.1,
            m_true_factor: 4,
            ablation_axes: AblationAxis::defaults(),
            ablation_discrimination: true,
            solver,
            fit_lambda: 0.1,
            inference_lambda: None,
            p: 1.0,
            output: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self.kind {
            ExperimentKind::Sweep | ExperimentKind::Ablation if self.a_grid.is_empty() => {
                return bad("the sweep a-grid is empty".into())
            }
            ExperimentKind::Discriminate if self.sparse_a.is_empty() => {
                return bad("no sparse datasets to discriminate".into())
            }
            ExperimentKind::Ablation if self.ablation_axes.is_empty() => return bad("no ablation axes".into()),
            ExperimentKind::Layers | ExperimentKind::Embeddings => {
                if self.datasets.is_empty() {
                    return bad(format!("{} needs at least one activation file", self.kind));
                }
                if let Some(missing) = self.datasets.iter().find(|p| !p.is_file()) {
                    return bad(format!("activation file {} does not exist", missing.display()));
                }
            }
            _ => {}
        }
        if self.d == 0 || self.n == 0 || self.m_true_factor == 0 {
            return bad("d, n and m_true_factor must be >= 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.p > 0.0) {
            return bad(format!("p must be positive, got {}", self.p));
        }
        if !(self.fit_lambda > 0.0 && self.fit_lambda.is_finite()) {
            return bad(format!("fit_lambda must be positive, got {}", self.fit_lambda));
        }
        if let Some(l) = self.inference_lambda {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("inference_lambda must be positive, got {l}"));
            }
        }
        Ok(())
    }

    /// Sets one option from its textual key and value, as used in config
    /// files and `--set` flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let s = &mut self.solver;
        match key {
            "profile" => {
                let profile: Profile = value.parse()?;
                let fresh = ExperimentConfig::new(self.kind, profile);
                self.d = fresh.d;
                self.n = fresh.n;
            }
            "a_grid" => self.a_grid = list(key, value)?,
            "sparse_a" => self.sparse_a = list(key, value)?,
            "datasets" => self.datasets = value.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect(),
            "d" => self.d = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "m_true_factor" => self.m_true_factor = num(key, value)?,
            "ablation_axes" => {
                self.ablation_axes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "ablation_discrimination" => self.ablation_discrimination = num(key, value)?,
            "fit_lambda" => self.fit_lambda = num(key, value)?,
            "inference_lambda" => self.inference_lambda = Some(num(key, value)?),
            "p" => self.p = num(key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "lambda" => s.lambda = Some(num(key, value)?),
            "dict_factor" => s.dict_factor = num(key, value)?,
            "phi_steps" => s.phi_steps = num(key, value)?,
            "step_size" => s.step_size = num(key, value)?,
            "step_rule" => {
                s.step_rule = match value {
                    "fixed" => StepRule::Fixed,
                    "lipschitz" => StepRule::Lipschitz,
                    other => return Err(Error::InvalidConfig(format!("unknown step_rule {other:?}"))),
                }
            }
            "batch_size" => s.batch_size = num(key, value)?,
            "max_alternations" => s.max_alternations = num(key, value)?,
            "rel_tol" => s.rel_tol = num(key, value)?,
            "adapt_lambda" => s.adapt_lambda = num(key, value)?,
            "adapt_rounds" => s.adapt_rounds = num(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are
/// skipped.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty key".into(),
            });
        }
        entries.push((key.to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    parse_config_text(&fs::read_to_string(path)?, path)
}

/// One metric for one dataset. A failed cell has `value: None` and a
/// `failure` reason on each of its rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Table the row belongs to, e.g. `sweep` or `dict_16d/discrimination`.
    pub table: String,
    pub dataset: String,
    pub d: usize,
    /// Dictionary size.
    pub m: usize,
    pub lambda: Option<f64>,
    pub metric: String,
    pub value: Option<f64>,
    pub variance_explained: Option<f64>,
    /// Ground-truth weighted sparsity `a / 2`, for synthetic sparse data.
    pub true_sparsity: Option<f64>,
    pub wall_time_s: f64,
    pub flag: Option<String>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub format_version: u32,
    pub kind: ExperimentKind,
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    fn new(kind: ExperimentKind, mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| (&a.table, &a.dataset, &a.metric).cmp(&(&b.table, &b.dataset, &b.metric)));
        Self {
            format_version: FORMAT_VERSION,
            kind,
            rows,
        }
    }

    pub fn value(&self, table: &str, dataset: &str, metric: &str) -> Option<f64> {
        self.row(table, dataset, metric).and_then(|r| r.value)
    }

    pub fn row(&self, table: &str, dataset: &str, metric: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.table == table && r.dataset == dataset && r.metric == metric)
    }

    pub fn tables(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.table.as_str()).collect();
        names.dedup();
        names
    }

    pub fn datasets(&self, table: &str) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .rows
            .iter()
            .filter(|r| r.table == table)
            .map(|r| r.dataset.as_str())
            .collect();
        names.dedup();
        names
    }

    pub fn failures(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.failure.is_some())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(dir) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let csv_path = with_suffix(stem, ".csv");
        let json_path = with_suffix(stem, ".json");
        write_atomic(&csv_path, &self.to_csv()?)?;
        write_atomic(&json_path, self.to_json()?.as_bytes())?;
        Ok((csv_path, json_path))
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Seed for one cell: FNV-1a of the cell id, mixed with the master seed
/// through a SplitMix64 finalizer.
pub fn cell_seed(master: u64, cell: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in cell.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn finite(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

struct Cell<'a> {
    table: &'a str,
    dataset: String,
    true_sparsity: Option<f64>,
    variance_threshold: Option<f64>,
}

impl Cell<'_> {
    fn rows(&self, d: usize, m: usize, report: std::result::Result<(MetricReport, f64), String>, started: Instant) -> Vec<ResultRow> {
        let wall = started.elapsed().as_secs_f64();
        let names = [METRIC_NONZERO, METRIC_FINAL_LOSS, METRIC_AVG_COEFF_NORM, METRIC_NORMALIZED_LOSS];
        match report {
            Ok((report, lambda)) => {
                let ve = finite(Some(report.variance_explained));
                let flag = match (self.variance_threshold, ve) {
                    (Some(t), Some(v)) if v < t => {
                        warn!("{}/{}: variance explained {v:.4} is below {t}", self.table, self.dataset);
                        Some(format!("variance_explained below {t}"))
                    }
                    _ => None,
                };
                report
                    .named_values()
                    .into_iter()
                    .map(|(metric, value)| ResultRow {
                        table: self.table.to_string(),
                        dataset: self.dataset.clone(),
                        d,
                        m,
                        lambda: finite(Some(lambda)),
                        metric: metric.to_string(),
                        value: finite(value),
                        variance_explained: ve,
                        true_sparsity: self.true_sparsity,
                        wall_time_s: wall,
                        flag: flag.clone(),
                        failure: None,
                    })
                    .collect()
            }
            Err(reason) => {
                warn!("{}/{} failed: {reason}", self.table, self.dataset);
                names
                    .into_iter()
                    .map(|metric| ResultRow {
                        table: self.table.to_string(),
                        dataset: self.dataset.clone(),
                        d,
                        m,
                        lambda: None,
                        metric: metric.to_string(),
                        value: None,
                        variance_explained: None,
                        true_sparsity: self.true_sparsity,
                        wall_time_s: wall,
                        flag: None,
                        failure: Some(reason.clone()),
                    })
                    .collect()
            }
        }
    }

    /// Fits `x` with `solver` and reports the metrics at the λ the fit ended on.
    fn fit(&self, x: Result<ActivationSet>, d: usize, solver: &SolverConfig, p: f64) -> Vec<ResultRow> {
        let started = Instant::now();
        let m = solver.dict_size(d);
        let outcome = x
            .and_then(|x| {
                let fit = fit_matrix(&x, solver)?;
                let report = MetricReport::compute(&x, &fit.dictionary, &fit.coefficients, fit.final_lambda, p)?;
                Ok((report, fit.final_lambda))
            })
            .map_err(|e| e.to_string());
        info!("{}/{} done in {:.1}s", self.table, self.dataset, started.elapsed().as_secs_f64());
        self.rows(d, m, outcome, started)
    }
}

fn cell_solver(cfg: &ExperimentConfig, cell_id: &str) -> SolverConfig {
    SolverConfig {
        seed: cell_seed(cfg.seed, &format!("{cell_id}/fit")),
        ..cfg.solver.clone()
    }
}

fn a_label(a: f64) -> String {
    // Zero-padded so rows sort in grid order.
    if a.fract() == 0.0 && a < 1e4 {
        format!("sparse_a{:04}", a as u64)
    } else {
        format!("sparse_a{a}")
    }
}

fn sweep_rows(cfg: &ExperimentConfig, table: &str) -> Vec<ResultRow> {
    cfg.a_grid
        .iter()
        .flat_map(|&a| {
            let dataset = a_label(a);
            let cell_id = format!("{table}/{dataset}");
            let synth = SynthConfig {
                m_true: cfg.m_true_factor * cfg.d,
                ..SynthConfig::new(cfg.d, a, cfg.sigma, cfg.n, cell_seed(cfg.seed, &format!("{cell_id}/data")))
            };
            let cell = Cell {
                table,
                dataset,
                true_sparsity: Some(a / 2.0),
                variance_threshold: None,
            };
            cell.fit(gen_sparse_linear(&synth).map(|(x, _)| x), cfg.d, &cell_solver(cfg, &cell_id), cfg.p)
        })
        .collect()
}

/// Dataset ids of the non-sparse controls.
pub const CONTROLS: [&str; 3] = ["gaussian", "heavy_tailed", "rademacher"];

fn discrimination_rows(cfg: &ExperimentConfig, table: &str) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for &a in &cfg.sparse_a {
        let dataset = a_label(a);
        let cell_id = format!("{table}/{dataset}");
        let synth = SynthConfig {
            m_true: cfg.m_true_factor * cfg.d,
            ..SynthConfig::new(cfg.d, a, cfg.sigma, cfg.n, cell_seed(cfg.seed, &format!("{cell_id}/data")))
        };
        let x = gen_sparse_linear(&synth).and_then(|(x, _)| normalize_for_loss(&x));
        let cell = Cell {
            table,
            dataset,
            true_sparsity: Some(a / 2.0),
            variance_threshold: None,
        };
        rows.extend(cell.fit(x, cfg.d, &cell_solver(cfg, &cell_id), cfg.p));
    }
    for control in CONTROLS {
        let cell_id = format!("{table}/{control}");
        let seed = cell_seed(cfg.seed, &format!("{cell_id}/data"));
        let x = match control {
            "gaussian" => gen_gaussian(cfg.d, cfg.n, seed),
            "heavy_tailed" => gen_heavy_tailed(cfg.d, cfg.n, seed),
            _ => gen_rademacher(cfg.d, cfg.n, seed),
        }
        .and_then(|x| normalize_for_loss(&x));
        let cell = Cell {
            table,
            dataset: control.to_string(),
            true_sparsity: None,
            variance_threshold: None,
        };
        rows.extend(cell.fit(x, cfg.d, &cell_solver(cfg, &cell_id), cfg.p));
    }
    rows
}

/// Metrics against the true weighted sparsity `a / 2` for every `a` in the
/// grid. Failed cells are recorded and the sweep continues.
pub fn run_sparsity_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    ExperimentConfig {
        kind: ExperimentKind::Sweep,
        ..cfg.clone()
    }
    .validate()?;
    Ok(ExperimentResult::new(ExperimentKind::Sweep, sweep_rows(cfg, "sweep")))
}

/// Sparse linear datasets next to Gaussian, heavy-tailed and Rademacher
/// controls. Every dataset is centered and scaled to unit mean row norm
/// first.
pub fn run_discrimination(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    ExperimentConfig {
        kind: ExperimentKind::Discriminate,
        ..cfg.clone()
    }
    .validate()?;
    Ok(ExperimentResult::new(ExperimentKind::Discriminate, discrimination_rows(cfg, "discrimination")))
}

/// Sweep (and discrimination, unless disabled) with one axis changed at a
/// time. Tables are named `<axis>/sweep` and `<axis>/discrimination`.
pub fn run_ablation_grid(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    ExperimentConfig {
        kind: ExperimentKind::Ablation,
        ..cfg.clone()
    }
    .validate()?;
    let mut rows = Vec::new();
    for axis in &cfg.ablation_axes {
        let mut varied = cfg.clone();
        axis.apply(&mut varied);
        let name = axis.name();
        rows.extend(sweep_rows(&varied, &format!("{name}/sweep")));
        if cfg.ablation_discrimination {
            rows.extend(discrimination_rows(&varied, &format!("{name}/discrimination")));
        }
    }
    Ok(ExperimentResult::new(ExperimentKind::Ablation, rows))
}

fn layer_id(path: &Path, index: usize) -> Result<String> {
    let layer = read_metadata(path)?.and_then(|s| s.layer());
    Ok(match layer {
        Some(l) => format!("layer_{l:03}"),
        None => format!("file_{index:03}"),
    })
}

/// Fits every layer file at a fixed training λ with a `16d` dictionary
/// (unless overridden), then decomposes at the inference λ and reports the
/// metrics there. Layers below the variance threshold are flagged.
pub fn run_layer_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    ExperimentConfig {
        kind: ExperimentKind::Layers,
        ..cfg.clone()
    }
    .validate()?;
    let train_lambda = cfg.fit_lambda;
    let infer_lambda = cfg.inference_lambda.unwrap_or(train_lambda);
    let mut rows = Vec::new();
    for (index, path) in cfg.datasets.iter().enumerate() {
        let x = read_activations(path)?;
        let dataset = layer_id(path, index)?;
        let cell_id = format!("layers/{dataset}");
        let solver = SolverConfig {
            adapt_lambda: false,
            lambda: Some(train_lambda),
            ..cell_solver(cfg, &cell_id)
        };
        let cell = Cell {
            table: "layers",
            dataset,
            true_sparsity: None,
            variance_threshold: Some(LAYER_VARIANCE_THRESHOLD),
        };
        let started = Instant::now();
        let d = x.d();
        let (x, _) = center(&x);
        let outcome = fit_fixed_lambda(&mut Source::Matrix(&x), &solver, train_lambda, None)
            .and_then(|fit| {
                let coeffs = if infer_lambda == train_lambda {
                    fit.coefficients
                } else {
                    infer_coefficients(&x, &fit.dictionary, infer_lambda)?
                };
                Ok((MetricReport::compute(&x, &fit.dictionary, &coeffs, infer_lambda, cfg.p)?, infer_lambda))
            })
            .map_err(|e| e.to_string());
        rows.extend(cell.rows(d, solver.dict_size(d), outcome, started));
    }
    Ok(ExperimentResult::new(ExperimentKind::Layers, rows))
}

/// Dataset id of the Gaussian reference fit in embedding runs.
pub const GAUSSIAN_CONTROL: &str = "gaussian_control";

/// Centers each embedding file, fits it with adaptive λ, and fits one
/// standard Gaussian control of the same shape per file. Fits below the
/// variance threshold are flagged.
pub fn run_embedding_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    ExperimentConfig {
        kind: ExperimentKind::Embeddings,
        ..cfg.clone()
    }
    .validate()?;
    let mut rows = Vec::new();
    for path in &cfg.datasets {
        let x = read_activations(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "embeddings".into());
        let table = format!("embeddings/{name}");
        let (n, d) = (x.n(), x.d());
        let (centered, _) = center(&x);
        let cell = Cell {
            table: &table,
            dataset: "embeddings".into(),
            true_sparsity: None,
            variance_threshold: Some(EMBEDDING_VARIANCE_THRESHOLD),
        };
        rows.extend(cell.fit(Ok(centered), d, &cell_solver(cfg, &format!("{table}/embeddings")), cfg.p));

        let control_id = format!("{table}/{GAUSSIAN_CONTROL}");
        let control = gen_gaussian(d, n, cell_seed(cfg.seed, &format!("{control_id}/data"))).map(|g| center(&g).0);
        let cell = Cell {
            table: &table,
            dataset: GAUSSIAN_CONTROL.into(),
            true_sparsity: None,
            variance_threshold: None,
        };
        rows.extend(cell.fit(control, d, &cell_solver(cfg, &control_id), cfg.p));
    }
    Ok(ExperimentResult::new(ExperimentKind::Embeddings, rows))
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    match cfg.kind {
        ExperimentKind::Sweep => run_sparsity_sweep(cfg),
        ExperimentKind::Discriminate => run_discrimination(cfg),
        ExperimentKind::Ablation => run_ablation_grid(cfg),
        ExperimentKind::Layers => run_layer_sweep(cfg),
        ExperimentKind::Embeddings => run_embedding_experiment(cfg),
    }
}
