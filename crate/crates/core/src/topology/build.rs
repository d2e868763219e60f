//! Training-time construction of a connection graph.

use std::ops::Range;
use std::str::FromStr;

use nalgebra::DVector;

use super::series::{KernelGroupConfig, SeriesGroup};
use super::{CascadeGroup, ConnectionGraph, InputSpec, ParallelGroup, StageModel};
use crate::cmaes::precision::{optimize_precision, sample_weights, PrecisionOutcome, PrecisionSearch, SampleWeighting};
use crate::dictionary::{ofs_select, OfsBudget};
use crate::weight_update::LinearRlsState;
use crate::{Error, Result};

/// Split of the first cascade group's dictionary into parallel stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Partition {
    /// One stage that keeps growing its dictionary online.
    Single,
    /// Stage sizes in training order, e.g. `(3,3)` or `1x6`.
    Groups(Vec<usize>),
}

impl Partition {
    pub fn total(&self) -> Option<usize> {
        match self {
            Partition::Single => None,
            Partition::Groups(g) => Some(g.iter().sum()),
        }
    }
}

impl FromStr for Partition {
    type Err = Error;

    /// Accepts `single`, `(a,b,...)`, `a,b`, `k x n` / `k×n` (k groups of
    /// n) and a bare size.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("single") {
            return Ok(Partition::Single);
        }
        let bad = || Error::usage(format!("cannot parse partition `{s}`"));
        let sizes: Vec<usize> = if let Some((k, n)) = t.split_once(['x', 'X', '×']) {
            let k: usize = k.trim().parse().map_err(|_| bad())?;
            let n: usize = n.trim().parse().map_err(|_| bad())?;
            // "1×6" in the tables reads as six groups of one node.
            vec![k; n]
        } else {
            let inner = t.strip_prefix('(').and_then(|r| r.strip_suffix(')')).unwrap_or(t);
            inner
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(bad());
        }
        Ok(Partition::Groups(sizes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SelectionMode {
    /// Dictionary chosen by the group's own sparsifier.
    Online,
    /// Orthogonal forward selection over the training span.
    Ofs { min_err_ratio: f64 },
}

/// Downstream cascade group reading lagged errors of the previous depth.
#[derive(Clone, Debug, PartialEq)]
pub enum CompensatorSpec {
    LastError,
    LinearRls { order: usize, beta2: f64, delta: f64 },
    /// Kernel group whose input dimension is the lag count `q`.
    Kernel { q: usize, config: KernelGroupConfig },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthGrowth {
    Fixed,
    /// Keep adding depths while validation MSE improves by at least this
    /// fraction.
    Auto { min_improvement: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionPlan {
    pub search: PrecisionSearch,
    /// Evaluation window, as indices into the training stream.
    pub window: Range<usize>,
    pub weighting: SampleWeighting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyConfig {
    pub primary: KernelGroupConfig,
    pub partition: Partition,
    pub selection: SelectionMode,
    pub compensators: Vec<CompensatorSpec>,
    pub depth_growth: DepthGrowth,
    pub monitor_window: usize,
    pub precision: Option<PrecisionPlan>,
}

#[derive(Clone, Debug)]
pub struct TrainingData<'a> {
    pub xs: &'a [DVector<f64>],
    pub ys: &'a [f64],
    /// Indices of the training stream used for validation MSE.
    pub validation: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub precision: Option<PrecisionOutcome>,
    /// Dictionary sizes of the first group's stages after training.
    pub stage_sizes: Vec<usize>,
    /// Validation MSE per depth of the full graph, before any truncation.
    pub validation_mse: Vec<f64>,
    pub depth: usize,
}

/// Builds the graph, optionally tunes the first group's precision, trains
/// every group prequentially over the training stream, and applies the
/// depth rule.
///
/// Downstream groups never feed back into upstream ones, so one joint
/// pass per sample trains the groups exactly as training them one after
/// another on the recorded residual series would.
pub fn train_construct(config: &TopologyConfig, data: TrainingData<'_>) -> Result<(ConnectionGraph, TrainReport)> {
    let n = data.xs.len();
    if n == 0 || data.ys.len() != n {
        return Err(Error::usage("training stream is empty or misaligned"));
    }
    if data.validation.is_empty() || data.validation.end > n {
        return Err(Error::usage(format!(
            "validation window {:?} outside the {n}-sample training stream",
            data.validation
        )));
    }

    let mut primary = config.primary.clone();
    let precision = match &config.precision {
        Some(plan) => {
            let w = plan.window.clone();
            if w.is_empty() || w.end > n {
                return Err(Error::usage(format!("precision window {w:?} outside the training stream")));
            }
            let omega = sample_weights(plan.weighting, w.len())?;
            let out = optimize_precision(&primary, &data.xs[w.clone()], &data.ys[w], &omega, &plan.search)?;
            primary.kernel = out.kernel.clone();
            Some(out)
        }
        None => None,
    };

    let first = build_first_group(config, &primary, &data)?;
    let mut groups = vec![first];
    for spec in &config.compensators {
        groups.push(build_compensator(spec)?);
    }
    let mut graph = ConnectionGraph::new(groups, config.monitor_window)?;
    for (x, &y) in data.xs.iter().zip(data.ys) {
        graph.step(x, y)?;
    }

    let validation_mse: Vec<f64> = (1..=graph.depth())
        .map(|d| mse(&graph.errors(d)[data.validation.clone()]))
        .collect();
    let depth = match config.depth_growth {
        DepthGrowth::Fixed => graph.depth(),
        DepthGrowth::Auto { min_improvement } => {
            let mut d = 1;
            while d < validation_mse.len() && validation_mse[d] <= (1.0 - min_improvement) * validation_mse[d - 1] {
                d += 1;
            }
            d
        }
    };
    graph.truncate(depth)?;

    let stage_sizes = graph.groups()[0]
        .stages
        .iter()
        .map(|s| match &s.model {
            StageModel::Kernel(g) => g.dictionary().len(),
            _ => 0,
        })
        .collect();
    Ok((
        graph,
        TrainReport {
            precision,
            stage_sizes,
            validation_mse,
            depth,
        },
    ))
}

fn build_first_group(config: &TopologyConfig, primary: &KernelGroupConfig, data: &TrainingData<'_>) -> Result<CascadeGroup> {
    let online_single = config.partition == Partition::Single && config.selection == SelectionMode::Online;
    if online_single {
        let stage = ParallelGroup::new(StageModel::Kernel(SeriesGroup::new(primary.clone())?));
        return CascadeGroup::new(vec![stage], InputSpec::Raw);
    }

    let centers = match &config.selection {
        SelectionMode::Online => {
            let cap = config.partition.total();
            let mut flat = SeriesGroup::new(KernelGroupConfig {
                max_size: cap,
                ..primary.clone()
            })?;
            for (x, &y) in data.xs.iter().zip(data.ys) {
                flat.learn(x, y)?;
            }
            flat.dictionary().centers().to_vec()
        }
        SelectionMode::Ofs { min_err_ratio } => {
            let budget = OfsBudget {
                max_terms: config.partition.total().or(primary.max_size).unwrap_or(data.xs.len()),
                min_err_ratio: *min_err_ratio,
            };
            ofs_select(data.xs, data.ys, &primary.kernel, budget)?.centers(data.xs)
        }
    };

    let sizes = match &config.partition {
        Partition::Single => vec![centers.len()],
        Partition::Groups(g) => g.clone(),
    };
    let want: usize = sizes.iter().sum();
    if want != centers.len() {
        return Err(Error::usage(format!(
            "partition sums to {want} nodes but selection produced {}",
            centers.len()
        )));
    }
    let mut stages = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let group = SeriesGroup::frozen(primary.clone(), centers[start..start + size].to_vec())?;
        stages.push(ParallelGroup::new(StageModel::Kernel(group)));
        start += size;
    }
    CascadeGroup::new(stages, InputSpec::Raw)
}

fn build_compensator(spec: &CompensatorSpec) -> Result<CascadeGroup> {
    match spec {
        CompensatorSpec::LastError => {
            CascadeGroup::new(vec![ParallelGroup::new(StageModel::LastError)], InputSpec::ErrorLags { q: 1 })
        }
        CompensatorSpec::LinearRls { order, beta2, delta } => CascadeGroup::new(
            vec![ParallelGroup::new(StageModel::LinearRls(LinearRlsState::new(*order, *beta2, *delta)?))],
            InputSpec::ErrorLags { q: *order },
        ),
        CompensatorSpec::Kernel { q, config } => CascadeGroup::new(
            vec![ParallelGroup::new(StageModel::Kernel(SeriesGroup::new(config.clone())?))],
            InputSpec::ErrorLags { q: *q },
        ),
    }
}

fn mse(errors: &[f64]) -> f64 {
    errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64
}
