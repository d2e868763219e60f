//! Config-driven experiments: build the dataset and graph, train, run the
//! online test span and report per-depth MAE/MSE.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmaes::precision::{PrecisionMode, PrecisionSearch, SampleWeighting};
use crate::cmaes::Termination;
use crate::datasets::{self, InputSpec, Integrator, Splits, SupervisedPair};
use crate::kernel::{GaussianKernel, Precision, UpdateSign};
use crate::topology::{
    default_distance_threshold, train_construct, write_error_channels, CompensatorSpec, ConnectionGraph, DepthGrowth,
    FullPolicy, KernelGroupConfig, Partition, PrecisionPlan, SelectionMode, Sparsifier, TopologyConfig, TrainReport,
    TrainingData, UpdaterKind,
};
use crate::weight_update::{DEFAULT_P_DELTA, DEFAULT_RIDGE};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Lorenz,
    Rlc,
    Sunspot,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Sunspot CSV; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    /// Raw samples to generate; defaults to what the test span needs.
    pub samples: Option<usize>,
    pub step: Option<f64>,
    #[serde(default)]
    pub integrator: Integrator,
    /// Sunspot lag count.
    pub lags: Option<usize>,
    /// Trailing-mean window applied to sunspot values (1 = raw).
    pub smoothing: Option<usize>,
    pub train: Option<[usize; 2]>,
    pub validation: Option<[usize; 2]>,
    pub test: Option<[usize; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifierName {
    Ald,
    Distance,
    LossChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdaterName {
    Krls,
    Mrls,
    Recurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    #[default]
    Stop,
    Replace,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub sparsifier: SparsifierName,
    /// Admission threshold; distance defaults to a data-driven value.
    pub nu: Option<f64>,
    pub updater: UpdaterName,
    pub lambda: Option<f64>,
    /// MRLS forgetting factor and innovation window.
    pub beta: Option<f64>,
    pub window: Option<usize>,
    pub delta: Option<f64>,
    pub eta: Option<f64>,
    pub lambda_rec: Option<f64>,
    #[serde(default)]
    pub feedback_lags: Vec<usize>,
    pub h0: Option<f64>,
    /// Isotropic precision scale; defaults to 1 / median squared distance
    /// between training inputs.
    pub kernel_scale: Option<f64>,
    /// Full precision matrix as rows; overrides `kernel_scale`.
    pub precision: Option<Vec<Vec<f64>>>,
    /// Dictionary cap m.
    pub max_size: Option<usize>,
    #[serde(default)]
    pub full_policy: PolicyName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensatorName {
    #[default]
    LastError,
    LinearRls,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionName {
    #[default]
    Online,
    Ofs,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    /// Number of cascade groups, the first included.
    pub depth: usize,
    pub compensator: CompensatorName,
    /// Error lags read by each compensator.
    pub q: usize,
    pub beta2: f64,
    pub rls_delta: f64,
    pub compensator_nu: Option<f64>,
    pub compensator_scale: Option<f64>,
    pub compensator_h0: Option<f64>,
    pub partition: String,
    pub selection: SelectionName,
    pub ofs_min_err_ratio: f64,
    pub auto_depth: bool,
    pub min_improvement: f64,
    pub monitor_window: usize,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            depth: 1,
            compensator: CompensatorName::LastError,
            q: 1,
            beta2: 0.99,
            rls_delta: DEFAULT_P_DELTA,
            compensator_nu: None,
            compensator_scale: None,
            compensator_h0: None,
            partition: "single".into(),
            selection: SelectionName::Online,
            ofs_min_err_ratio: 0.0,
            auto_depth: false,
            min_improvement: 0.01,
            monitor_window: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionModeName {
    #[default]
    Off,
    Alg1,
    Alg2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingName {
    #[default]
    Uniform,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignName {
    #[default]
    Plus,
    Minus,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionSection {
    pub mode: PrecisionModeName,
    /// D_sigma as indices into the supervised stream; defaults to the
    /// validation span.
    pub window: Option<[usize; 2]>,
    pub weighting: WeightingName,
    pub half_life: f64,
    pub generations: usize,
    pub population: Option<usize>,
    pub rounds: usize,
    pub sign: SignName,
    pub c0: Option<f64>,
    pub sigma0: Option<f64>,
}

impl Default for PrecisionSection {
    fn default() -> Self {
        PrecisionSection {
            mode: PrecisionModeName::Off,
            window: None,
            weighting: WeightingName::Uniform,
            half_life: 100.0,
            generations: 20,
            population: None,
            rounds: 1,
            sign: SignName::Plus,
            c0: None,
            sigma0: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Tsv,
}

impl OutputFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            OutputFormat::Csv => b',',
            OutputFormat::Tsv => b'\t',
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Tsv => "tsv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub format: OutputFormat,
    pub traces: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            format: OutputFormat::Csv,
            traces: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub topology: TopologySection,
    #[serde(default)]
    pub precision: PrecisionSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Grid for `sweep`: dotted key to list of values.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl ExperimentConfig {
    /// Parses TOML, resolving a relative dataset path against `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(&e))?;
        Self::from_table(table, base_dir)
    }

    pub fn from_table(table: toml::Table, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| toml_error(&e))?;
        if let (Some(base), Some(p)) = (base_dir, cfg.dataset.path.as_ref()) {
            if p.is_relative() {
                cfg.dataset.path = Some(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if t.depth == 0 {
            return Err(Error::config("topology.depth", "must be at least 1"));
        }
        if t.q == 0 {
            return Err(Error::config("topology.q", "must be at least 1"));
        }
        if t.monitor_window == 0 {
            return Err(Error::config("topology.monitor_window", "must be at least 1"));
        }
        let partition: Partition = t
            .partition
            .parse()
            .map_err(|e: Error| Error::config("topology.partition", e.to_string()))?;
        if let (Some(total), Some(m)) = (partition.total(), self.algorithm.max_size) {
            if total != m {
                return Err(Error::config(
                    "topology.partition",
                    format!("partition totals {total} nodes but algorithm.max_size is {m}"),
                ));
            }
        }
        if self.dataset.kind == DatasetKind::Sunspot && self.dataset.path.is_none() {
            return Err(Error::config("dataset.path", "sunspot data needs a CSV path"));
        }
        if self.precision.rounds == 0 && self.precision.mode != PrecisionModeName::Off {
            return Err(Error::config("precision.rounds", "must be at least 1"));
        }
        Ok(())
    }
}

fn toml_error(e: &toml::de::Error) -> Error {
    Error::Config {
        field: "<toml>".into(),
        message: e.to_string().trim().to_string(),
    }
}

/// Supervised stream plus the spans that partition it.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub series: Vec<DVector<f64>>,
    pub columns: Vec<&'static str>,
    pub pairs: Vec<SupervisedPair>,
    pub splits: Splits,
}

fn span(r: Option<[usize; 2]>, default: Range<usize>) -> Range<usize> {
    r.map_or(default, |[a, b]| a..b)
}

fn splits_for(cfg: &DatasetConfig) -> Splits {
    let base = match cfg.kind {
        DatasetKind::Lorenz => Splits::lorenz(),
        DatasetKind::Rlc => Splits::rlc(),
        DatasetKind::Sunspot => Splits::sunspot(),
    };
    Splits {
        train: span(cfg.train, base.train),
        validation: span(cfg.validation, base.validation),
        test: span(cfg.test, base.test),
    }
}

fn finish(
    series: Vec<DVector<f64>>,
    columns: Vec<&'static str>,
    input: InputSpec,
    target: usize,
    horizon: usize,
    splits: Splits,
) -> Result<PreparedData> {
    let pairs = datasets::make_supervised(&series, input, target, horizon)?;
    splits.check(pairs.len())?;
    Ok(PreparedData {
        series,
        columns,
        pairs,
        splits,
    })
}

pub fn prepare_dataset(cfg: &DatasetConfig) -> Result<PreparedData> {
    let splits = splits_for(cfg);
    match cfg.kind {
        DatasetKind::Lorenz => {
            let n = cfg.samples.unwrap_or(splits.test.end + 5);
            let h = cfg.step.unwrap_or(datasets::LORENZ_STEP);
            let s = datasets::gen_lorenz(n, h, datasets::LORENZ_START, cfg.integrator)?;
            finish(s, vec!["z1", "z2", "z3"], InputSpec::State, 1, 5, splits)
        }
        DatasetKind::Rlc => {
            let n = cfg.samples.unwrap_or(splits.test.end + 1);
            let h = cfg.step.unwrap_or(datasets::RLC_STEP);
            let s = datasets::gen_rlc(n, h, datasets::RLC_START, cfg.integrator)?;
            finish(s, vec!["current", "voltage"], InputSpec::State, 1, 1, splits)
        }
        DatasetKind::Sunspot => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::config("dataset.path", "sunspot data needs a CSV path"))?;
            prepare_sunspot(datasets::load_sunspot(path)?, cfg)
        }
    }
}

/// Sunspot pipeline on values already loaded: optional smoothing, then
/// lagged one-step pairs.
pub fn prepare_sunspot(mut values: Vec<f64>, cfg: &DatasetConfig) -> Result<PreparedData> {
    if let Some(w) = cfg.smoothing {
        values = datasets::trailing_mean(&values, w);
    }
    if let Some(n) = cfg.samples {
        values.truncate(n);
    }
    let lags = cfg.lags.unwrap_or(4);
    let s = values.into_iter().map(|x| DVector::from_element(1, x)).collect();
    finish(s, vec!["sunspots"], InputSpec::Lags { component: 0, lags }, 0, 1, splits_for(cfg))
}

fn auto_scale(xs: &[DVector<f64>]) -> Result<f64> {
    // default_distance_threshold is a tenth of the median squared distance.
    let t = default_distance_threshold(xs, 500)?;
    if t > 0.0 {
        Ok(0.1 / t)
    } else {
        Err(Error::config("algorithm.kernel_scale", "training inputs are all identical; set a scale"))
    }
}

fn kernel_for(alg: &AlgorithmConfig, xs: &[DVector<f64>]) -> Result<GaussianKernel> {
    let dim = xs[0].len();
    let h0 = alg.h0.unwrap_or(1.0);
    let kernel = match (&alg.precision, alg.kernel_scale) {
        (Some(rows), _) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::config("algorithm.precision", format!("expected a {dim}x{dim} matrix")));
            }
            let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            GaussianKernel::new(Precision::new(m)?, h0)
        }
        (None, Some(s)) => GaussianKernel::isotropic(dim, s, h0),
        (None, None) => GaussianKernel::isotropic(dim, auto_scale(xs)?, h0),
    };
    kernel.map_err(|e| Error::config("algorithm", e.to_string()))
}

fn updater_for(alg: &AlgorithmConfig) -> UpdaterKind {
    match alg.updater {
        UpdaterName::Krls => UpdaterKind::Krls {
            lambda: alg.lambda.unwrap_or(DEFAULT_RIDGE),
        },
        UpdaterName::Mrls => UpdaterKind::Mrls {
            beta: alg.beta.unwrap_or(0.99),
            window: alg.window.unwrap_or(1),
            delta: alg.delta.unwrap_or(DEFAULT_P_DELTA),
        },
        UpdaterName::Recurrent => UpdaterKind::RecurrentGrad {
            eta: alg.eta.unwrap_or(0.1),
            lambda_rec: alg.lambda_rec.unwrap_or(0.0),
            feedback_lags: alg.feedback_lags.clone(),
        },
    }
}

fn sparsifier_for(name: SparsifierName, nu: Option<f64>, xs: &[DVector<f64>]) -> Result<Sparsifier> {
    Ok(match name {
        SparsifierName::Ald => Sparsifier::Ald { nu1: nu.unwrap_or(0.01) },
        SparsifierName::Distance => Sparsifier::Distance {
            nu2: match nu {
                Some(v) => v,
                None => default_distance_threshold(xs, 500)?,
            },
        },
        SparsifierName::LossChange => Sparsifier::LossChange { nu3: nu.unwrap_or(1e-3) },
    })
}

/// Translates the config into a topology for the given training inputs.
pub fn build_topology(cfg: &ExperimentConfig, train_xs: &[DVector<f64>]) -> Result<TopologyConfig> {
    let alg = &cfg.algorithm;
    let primary = KernelGroupConfig {
        kernel: kernel_for(alg, train_xs)?,
        sparsifier: sparsifier_for(alg.sparsifier, alg.nu, train_xs)?,
        updater: updater_for(alg),
        max_size: alg.max_size,
        full_policy: match alg.full_policy {
            PolicyName::Stop => FullPolicy::Stop,
            PolicyName::Replace => FullPolicy::Replace,
        },
    };
    let t = &cfg.topology;
    let compensator = match t.compensator {
        CompensatorName::LastError => CompensatorSpec::LastError,
        CompensatorName::LinearRls => CompensatorSpec::LinearRls {
            order: t.q,
            beta2: t.beta2,
            delta: t.rls_delta,
        },
        CompensatorName::Kernel => CompensatorSpec::Kernel {
            q: t.q,
            config: KernelGroupConfig {
                kernel: GaussianKernel::isotropic(t.q, t.compensator_scale.unwrap_or(1.0), t.compensator_h0.unwrap_or(1.0))
                    .map_err(|e| Error::config("topology.compensator_scale", e.to_string()))?,
                sparsifier: Sparsifier::Ald {
                    nu1: t.compensator_nu.unwrap_or(0.01),
                },
                updater: UpdaterKind::Krls {
                    lambda: alg.lambda.unwrap_or(DEFAULT_RIDGE),
                },
                max_size: None,
                full_policy: FullPolicy::Stop,
            },
        },
    };
    let p = &cfg.precision;
    let precision = match p.mode {
        PrecisionModeName::Off => None,
        mode => Some(PrecisionPlan {
            search: PrecisionSearch {
                mode: if mode == PrecisionModeName::Alg1 {
                    PrecisionMode::Reselect
                } else {
                    PrecisionMode::FixedDictionary
                },
                c0: p.c0,
                sign: match p.sign {
                    SignName::Plus => UpdateSign::Plus,
                    SignName::Minus => UpdateSign::Minus,
                },
                sigma0: p.sigma0,
                population: p.population,
                termination: Termination::generations(p.generations),
                rounds: p.rounds,
                seed: cfg.seed,
            },
            window: Range::default(),
            weighting: match p.weighting {
                WeightingName::Uniform => SampleWeighting::Uniform,
                WeightingName::Exponential => SampleWeighting::Exponential { half_life: p.half_life },
            },
        }),
    };
    Ok(TopologyConfig {
        primary,
        partition: t.partition.parse()?,
        selection: match t.selection {
            SelectionName::Online => SelectionMode::Online,
            SelectionName::Ofs => SelectionMode::Ofs {
                min_err_ratio: t.ofs_min_err_ratio,
            },
        },
        compensators: vec![compensator; t.depth - 1],
        depth_growth: if t.auto_depth {
            DepthGrowth::Auto {
                min_improvement: t.min_improvement,
            }
        } else {
            DepthGrowth::Fixed
        },
        monitor_window: t.monitor_window,
        precision,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub depth: usize,
    pub mae: f64,
    pub mse: f64,
}

/// Mean absolute and mean squared error of one trace.
pub fn mae_mse(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::usage("metrics need at least one error"));
    }
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    Ok((mae, mse))
}

pub fn compute_metrics(errors_per_depth: &[Vec<f64>]) -> Result<Vec<DepthMetrics>> {
    errors_per_depth
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (mae, mse) = mae_mse(e)?;
            Ok(DepthMetrics { depth: i + 1, mae, mse })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub metrics: Vec<DepthMetrics>,
    /// Supervised-stream indices of the test span.
    pub test: Range<usize>,
    pub targets: Vec<f64>,
    /// Per depth, aligned with `targets`.
    pub predictions: Vec<Vec<f64>>,
    pub errors: Vec<Vec<f64>>,
    /// Depth with the smallest test MSE.
    pub best_depth: usize,
    pub train: TrainReport,
    /// Full graph after the run, covering train and test spans.
    pub graph: ConnectionGraph,
    /// Supervised-stream index of the graph's first step.
    pub first_index: usize,
    pub config_echo: String,
    pub wall_time: Duration,
}

impl MetricsReport {
    pub fn mse(&self, depth: usize) -> f64 {
        self.metrics[depth - 1].mse
    }
}

/// Trains on the training span, then predicts-then-updates through the test
/// span, reporting per-depth metrics over the test span only.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    let data = prepare_dataset(&cfg.dataset)?;
    run_prepared(cfg, &data, start)
}

/// [`run_experiment`] on an already prepared stream; `start` anchors the
/// reported wall time.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData, start: Instant) -> Result<MetricsReport> {
    let sp = &data.splits;
    let xs: Vec<DVector<f64>> = data.pairs.iter().map(|p| p.x.clone()).collect();
    let ys: Vec<f64> = data.pairs.iter().map(|p| p.y).collect();

    let train = sp.train.clone();
    let mut topo = build_topology(cfg, &xs[train.clone()])?;
    if let Some(plan) = topo.precision.as_mut() {
        let w = span(cfg.precision.window, sp.validation.clone());
        if w.start < train.start || w.end > train.end || w.is_empty() {
            return Err(Error::config("precision.window", format!("{w:?} must lie inside the training span {train:?}")));
        }
        plan.window = (w.start - train.start)..(w.end - train.start);
    }
    let validation = (sp.validation.start - train.start)..(sp.validation.end - train.start);
    let (mut graph, train_report) = train_construct(
        &topo,
        TrainingData {
            xs: &xs[train.clone()],
            ys: &ys[train.clone()],
            validation,
        },
    )?;
    for i in train.end..sp.test.end {
        graph.step(&xs[i], ys[i]).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("at stream index {i}: {m}")),
            other => other,
        })?;
    }

    let local = (sp.test.start - train.start)..(sp.test.end - train.start);
    let depth = graph.depth();
    let errors: Vec<Vec<f64>> = (1..=depth).map(|d| graph.errors(d)[local.clone()].to_vec()).collect();
    let predictions: Vec<Vec<f64>> = (1..=depth).map(|d| graph.predictions(d)[local.clone()].to_vec()).collect();
    let metrics = compute_metrics(&errors)?;
    let best_depth = metrics
        .iter()
        .fold((1, f64::INFINITY), |best, m| if m.mse < best.1 { (m.depth, m.mse) } else { best })
        .0;
    Ok(MetricsReport {
        metrics,
        test: sp.test.clone(),
        targets: graph.targets()[local].to_vec(),
        predictions,
        errors,
        best_depth,
        train: train_report,
        graph,
        first_index: train.start,
        config_echo: cfg.to_toml(),
        wall_time: start.elapsed(),
    })
}

fn writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// `report`, `trace_depth{d}`, `channels` and the config echo. Nothing
/// time-dependent is written, so equal runs give equal bytes.
pub fn write_outputs(report: &MetricsReport, dir: &Path, format: OutputFormat, traces: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ext = format.extension();
    let delim = format.delimiter();

    let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(writer(dir, &format!("report.{ext}"))?);
    w.write_record(["depth", "mae", "mse"])?;
    for m in &report.metrics {
        w.write_record([m.depth.to_string(), m.mae.to_string(), m.mse.to_string()])?;
    }
    w.flush()?;

    if traces {
        for d in 1..=report.metrics.len() {
            let mut w = csv::WriterBuilder::new()
                .delimiter(delim)
                .from_writer(writer(dir, &format!("trace_depth{d}.{ext}"))?);
            w.write_record(["n", "y", "prediction", "error"])?;
            for (k, n) in report.test.clone().enumerate() {
                w.write_record([
                    n.to_string(),
                    report.targets[k].to_string(),
                    report.predictions[d - 1][k].to_string(),
                    report.errors[d - 1][k].to_string(),
                ])?;
            }
            w.flush()?;
        }
        let origins: Vec<usize> = (report.first_index..report.first_index + report.graph.len()).collect();
        write_error_channels(&report.graph, &origins, delim, writer(dir, &format!("channels.{ext}"))?)?;
    }
    let mut echo = writer(dir, "config.toml")?;
    echo.write_all(report.config_echo.as_bytes())?;
    echo.flush()?;
    Ok(())
}

/// Writes the raw generated or loaded series as `n,<components>`.
pub fn generate(cfg: &ExperimentConfig, dir: &Path, format: OutputFormat) -> Result<PathBuf> {
    let data = prepare_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(dir)?;
    let name = match cfg.dataset.kind {
        DatasetKind::Lorenz => "lorenz",
        DatasetKind::Rlc => "rlc",
        DatasetKind::Sunspot => "sunspot",
    };
    let path = dir.join(format!("{name}.{}", format.extension()));
    datasets::write_series(writer(dir, path.file_name().unwrap().to_str().unwrap())?, &data.columns, &data.series, format.delimiter())?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub index: usize,
    pub assignment: Vec<(String, toml::Value)>,
    pub outcome: std::result::Result<Vec<DepthMetrics>, String>,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::config(key, "empty sweep key"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    t.insert(leaf.to_string(), value);
    Ok(())
}

/// Expands the `[sweep]` grid (keys in sorted order, last key fastest) into
/// concrete configs.
pub fn expand_sweep(cfg: &ExperimentConfig) -> Result<Vec<(Vec<(String, toml::Value)>, ExperimentConfig)>> {
    if cfg.sweep.is_empty() {
        return Err(Error::config("sweep", "no keys to sweep"));
    }
    if let Some((k, _)) = cfg.sweep.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::config(format!("sweep.{k}"), "needs at least one value"));
    }
    let base = {
        let mut c = cfg.clone();
        c.sweep.clear();
        toml::Table::try_from(&c).map_err(|e| Error::config("sweep", e.to_string()))?
    };
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in &cfg.sweep {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|assignment| {
            let mut t = base.clone();
            for (k, v) in &assignment {
                set_dotted(&mut t, k, v.clone())?;
            }
            // Paths were already resolved on load.
            Ok((assignment, ExperimentConfig::from_table(t, None)?))
        })
        .collect()
}

/// Runs every grid point in parallel; each run writes into `dir/run_{i}`
/// and a summary row goes to `dir/sweep.{ext}`. Failed runs are reported,
/// not fatal.
pub fn run_sweep(cfg: &ExperimentConfig, dir: &Path, format: OutputFormat) -> Result<Vec<SweepRun>> {
    let grid = expand_sweep(cfg)?;
    std::fs::create_dir_all(dir)?;
    let runs: Vec<SweepRun> = grid
        .into_par_iter()
        .enumerate()
        .map(|(index, (assignment, c))| {
            let outcome = run_experiment(&c).and_then(|r| {
                write_outputs(&r, &dir.join(format!("run_{index:03}")), format, c.output.traces)?;
                Ok(r.metrics)
            });
            SweepRun {
                index,
                assignment,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();

    let keys: Vec<&String> = cfg.sweep.keys().collect();
    let mut w = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(writer(dir, &format!("sweep.{}", format.extension()))?);
    let mut header = vec!["run".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["best_depth", "best_mse", "depth1_mse", "status"].map(String::from));
    w.write_record(&header)?;
    for r in &runs {
        let mut row = vec![r.index.to_string()];
        row.extend(r.assignment.iter().map(|(_, v)| v.to_string()));
        match &r.outcome {
            Ok(m) => {
                let best = m.iter().fold(m[0], |b, x| if x.mse < b.mse { *x } else { b });
                row.extend([best.depth.to_string(), best.mse.to_string(), m[0].mse.to_string(), "ok".into()]);
            }
            Err(e) => row.extend([String::new(), String::new(), String::new(), e.clone()]),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(runs)
}
