//! Series, parallel and cascade connections of online predictors.
//!
//! A [`ConnectionGraph`] is an ordered list of cascade groups. Group 1
//! reads the raw input and predicts `y`; group `i > 1` reads lagged errors
//! of depth `i − 1` and predicts that depth's forthcoming error. Inside a
//! cascade group the parallel stages run on successive residuals. The
//! depth-`d` prediction is the sum of the first `d` group predictions.

mod build;
mod series;

pub use build::{
    train_construct, CompensatorSpec, DepthGrowth, Partition, PrecisionPlan, SelectionMode, TopologyConfig,
    TrainReport, TrainingData,
};
pub use series::{default_distance_threshold, FullPolicy, KernelGroupConfig, LearnEvent, SeriesGroup, Sparsifier, UpdaterKind};

use std::io::Write;

use nalgebra::DVector;

use crate::weight_update::LinearRlsState;
use crate::{Error, Result};

/// The most recent error, or 0 with no history.
pub fn last_error_compensator(error_history: &[f64]) -> f64 {
    error_history.last().copied().unwrap_or(0.0)
}

/// Predictor inside one parallel stage.
#[derive(Clone, Debug)]
pub enum StageModel {
    Kernel(SeriesGroup),
    LinearRls(LinearRlsState),
    /// Returns the first input component, which for error-lag inputs is
    /// the latest upstream error.
    LastError,
}

impl StageModel {
    fn predict(&self, input: &DVector<f64>) -> Result<f64> {
        match self {
            StageModel::Kernel(g) => g.predict(input),
            StageModel::LinearRls(s) => {
                if input.len() != s.dim() {
                    return Err(Error::usage("linear stage input has the wrong length"));
                }
                Ok(s.predict(input))
            }
            StageModel::LastError => Ok(input[0]),
        }
    }

    fn learn(&mut self, input: &DVector<f64>, target: f64) -> Result<()> {
        match self {
            StageModel::Kernel(g) => g.learn(input, target).map(|_| ()),
            StageModel::LinearRls(s) => s.step(input, target).map(|_| ()),
            StageModel::LastError => Ok(()),
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match self {
            StageModel::Kernel(g) => Some(g.input_dim()),
            StageModel::LinearRls(s) => Some(s.dim()),
            StageModel::LastError => None,
        }
    }
}

/// One stage of a cascade group with its recorded series.
#[derive(Clone, Debug)]
pub struct ParallelGroup {
    pub model: StageModel,
    /// Residual target this stage was trained on at each update.
    pub targets: Vec<f64>,
    pub predictions: Vec<f64>,
    pub errors: Vec<f64>,
}

impl ParallelGroup {
    pub fn new(model: StageModel) -> Self {
        ParallelGroup {
            model,
            targets: Vec::new(),
            predictions: Vec::new(),
            errors: Vec::new(),
        }
    }
}

/// Which series feeds a cascade group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Raw,
    /// The last `q` errors of the previous depth, most recent first.
    ErrorLags { q: usize },
}

#[derive(Clone, Debug)]
pub struct CascadeGroup {
    pub stages: Vec<ParallelGroup>,
    pub input: InputSpec,
}

impl CascadeGroup {
    pub fn new(stages: Vec<ParallelGroup>, input: InputSpec) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::usage("a cascade group needs at least one stage"));
        }
        if let InputSpec::ErrorLags { q } = input {
            if q == 0 {
                return Err(Error::usage("error-lag input needs q >= 1"));
            }
            for s in &stages {
                if s.model.input_dim().is_some_and(|d| d != q) {
                    return Err(Error::usage(format!("stage input dimension differs from q = {q}")));
                }
            }
        } else if stages.iter().any(|s| matches!(s.model, StageModel::LastError)) {
            return Err(Error::usage("the last-error compensator needs error-lag input"));
        }
        Ok(CascadeGroup { stages, input })
    }

    /// Input for the next step, or `None` while history is too short.
    fn input_vector(&self, x: &DVector<f64>, upstream: &[f64]) -> Option<DVector<f64>> {
        match self.input {
            InputSpec::Raw => Some(x.clone()),
            InputSpec::ErrorLags { q } => {
                if upstream.len() < q {
                    return None;
                }
                Some(DVector::from_iterator(q, upstream.iter().rev().take(q).copied()))
            }
        }
    }

    fn stage_predictions(&self, input: &DVector<f64>) -> Result<Vec<f64>> {
        self.stages.iter().map(|s| s.model.predict(input)).collect()
    }
}

/// Outcome of one prequential step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Depth `d` (1-based) prediction at index `d − 1`.
    pub predictions: Vec<f64>,
    pub errors: Vec<f64>,
    /// Depth adopted for this step, chosen from earlier errors only.
    pub active_depth: usize,
}

#[derive(Clone, Debug)]
pub struct ConnectionGraph {
    groups: Vec<CascadeGroup>,
    predictions: Vec<Vec<f64>>,
    errors: Vec<Vec<f64>>,
    targets: Vec<f64>,
    active: Vec<usize>,
    active_depth: usize,
    monitor_window: usize,
    skipped: usize,
}

impl ConnectionGraph {
    pub fn new(groups: Vec<CascadeGroup>, monitor_window: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::usage("a graph needs at least one cascade group"));
        }
        if groups[0].input != InputSpec::Raw {
            return Err(Error::usage("the first cascade group must read the raw input"));
        }
        if groups[1..].iter().any(|g| g.input == InputSpec::Raw) {
            return Err(Error::usage("downstream cascade groups read error lags"));
        }
        if monitor_window == 0 {
            return Err(Error::usage("monitor window must be at least 1"));
        }
        let depth = groups.len();
        Ok(ConnectionGraph {
            groups,
            predictions: vec![Vec::new(); depth],
            errors: vec![Vec::new(); depth],
            targets: Vec::new(),
            active: Vec::new(),
            active_depth: 1,
            monitor_window,
            skipped: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[CascadeGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Error trace of depth `d` (1-based).
    pub fn errors(&self, depth: usize) -> &[f64] {
        &self.errors[depth - 1]
    }

    pub fn predictions(&self, depth: usize) -> &[f64] {
        &self.predictions[depth - 1]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Depth adopted at each step.
    pub fn active_trace(&self) -> &[usize] {
        &self.active
    }

    pub fn active_depth(&self) -> usize {
        self.active_depth
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Drops cascade groups beyond `depth` together with their traces.
    pub fn truncate(&mut self, depth: usize) -> Result<()> {
        if depth == 0 || depth > self.depth() {
            return Err(Error::usage(format!("cannot truncate a depth-{} graph to {depth}", self.depth())));
        }
        self.groups.truncate(depth);
        self.predictions.truncate(depth);
        self.errors.truncate(depth);
        self.active_depth = self.active_depth.min(depth);
        Ok(())
    }

    /// Prediction of cascade group `i` (1-based) for the next step.
    pub fn group_prediction(&self, x: &DVector<f64>, i: usize) -> Result<f64> {
        if i == 0 || i > self.depth() {
            return Err(Error::usage(format!("group {i} outside a depth-{} graph", self.depth())));
        }
        let g = &self.groups[i - 1];
        let upstream: &[f64] = if i == 1 { &[] } else { &self.errors[i - 2] };
        match g.input_vector(x, upstream) {
            None => Ok(0.0),
            Some(input) => Ok(sum(&g.stage_predictions(&input)?)),
        }
    }

    /// Additive depth-`d` prediction for the next step.
    pub fn predict(&self, x: &DVector<f64>, depth: usize) -> Result<f64> {
        if depth == 0 || depth > self.depth() {
            return Err(Error::usage(format!("depth {depth} outside a depth-{} graph", self.depth())));
        }
        let mut acc = 0.0;
        for i in 1..=depth {
            acc += self.group_prediction(x, i)?;
        }
        Ok(acc)
    }

    /// Predict every depth, record errors, then update every stage.
    pub fn step(&mut self, x: &DVector<f64>, y: f64) -> Result<StepRecord> {
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            self.skipped += 1;
            return Err(Error::numeric(format!("non-finite sample skipped at step {}", self.len())));
        }
        let depth = self.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut stage_preds = Vec::with_capacity(depth);
        let mut preds = Vec::with_capacity(depth);
        let mut errs = Vec::with_capacity(depth);

        // Forward pass: nothing here reads y except the error bookkeeping,
        // and group i only reads errors of depth i − 1 up to the last step.
        for i in 0..depth {
            let g = &self.groups[i];
            let upstream: &[f64] = if i == 0 { &[] } else { &self.errors[i - 1] };
            let input = g.input_vector(x, upstream);
            let sp = match &input {
                Some(v) => g.stage_predictions(v)?,
                None => vec![0.0; g.stages.len()],
            };
            let gi = sum(&sp);
            let (p, e) = if i == 0 {
                (gi, y - gi)
            } else {
                (preds[i - 1] + gi, errs[i - 1] - gi)
            };
            preds.push(p);
            errs.push(e);
            inputs.push(input);
            stage_preds.push(sp);
        }

        // Updates: each stage learns the residual left by the stages before it.
        for i in 0..depth {
            let Some(input) = &inputs[i] else { continue };
            let mut target = if i == 0 { y } else { errs[i - 1] };
            for (k, stage) in self.groups[i].stages.iter_mut().enumerate() {
                let g = stage_preds[i][k];
                stage.targets.push(target);
                stage.predictions.push(g);
                stage.errors.push(target - g);
                stage.model.learn(input, target)?;
                target -= g;
            }
        }

        let record = StepRecord {
            predictions: preds.clone(),
            errors: errs.clone(),
            active_depth: self.active_depth,
        };
        for i in 0..depth {
            self.predictions[i].push(preds[i]);
            self.errors[i].push(errs[i]);
        }
        self.targets.push(y);
        self.active.push(self.active_depth);
        self.active_depth = self.select_best_depth(self.monitor_window);
        Ok(record)
    }

    /// Depth with the smallest MSE over the latest `window` steps.
    pub fn select_best_depth(&self, window: usize) -> usize {
        best_depth(&self.errors, window)
    }
}

/// Argmin over depths of the windowed MSE; ties and empty traces give the
/// smaller depth.
pub fn best_depth(errors: &[Vec<f64>], window: usize) -> usize {
    let mut best = (1, f64::INFINITY);
    for (d, trace) in errors.iter().enumerate() {
        if trace.is_empty() {
            return 1;
        }
        let tail = &trace[trace.len().saturating_sub(window.max(1))..];
        let mse = tail.iter().map(|e| e * e).sum::<f64>() / tail.len() as f64;
        if mse < best.1 {
            best = (d + 1, mse);
        }
    }
    best.0
}

fn sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Writes the per-depth prediction and error series as rows
/// `(n, depth, prediction, error)`; `origins[i]` labels step `i`.
pub fn write_error_channels<W: Write>(
    graph: &ConnectionGraph,
    origins: &[usize],
    delimiter: u8,
    out: W,
) -> Result<()> {
    if origins.len() != graph.len() {
        return Err(Error::usage("one origin index per recorded step is required"));
    }
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
    w.write_record(["n", "depth", "prediction", "error"])?;
    for d in 1..=graph.depth() {
        for (i, n) in origins.iter().enumerate() {
            w.write_record([
                n.to_string(),
                d.to_string(),
                graph.predictions(d)[i].to_string(),
                graph.errors(d)[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::GaussianKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn krls_cfg(dim: usize) -> KernelGroupConfig {
        KernelGroupConfig {
            kernel: GaussianKernel::isotropic(dim, 1.0, 1.0).unwrap(),
            sparsifier: Sparsifier::Ald { nu1: 0.05 },
            updater: UpdaterKind::Krls { lambda: 1e-6 },
            max_size: None,
            full_policy: FullPolicy::Stop,
        }
    }

    fn raw_group(cfg: KernelGroupConfig) -> CascadeGroup {
        CascadeGroup::new(
            vec![ParallelGroup::new(StageModel::Kernel(SeriesGroup::new(cfg).unwrap()))],
            InputSpec::Raw,
        )
        .unwrap()
    }

    fn last_error_group() -> CascadeGroup {
        CascadeGroup::new(vec![ParallelGroup::new(StageModel::LastError)], InputSpec::ErrorLags { q: 1 }).unwrap()
    }

    fn stream(seed: u64, n: usize) -> Vec<(DVector<f64>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.05;
                let x = DVector::from_column_slice(&[t.sin(), (0.7 * t).cos()]);
                let y = (1.5 * t).sin() + 0.05 * rng.random_range(-1.0..1.0);
                (x, y)
            })
            .collect()
    }

    #[test]
    fn last_error_cases() {
        assert_eq!(last_error_compensator(&[]), 0.0);
        assert_eq!(last_error_compensator(&[1.0, 0.3]), 0.3);
    }

    #[test]
    fn constant_error_is_compensated() {
        // A zero-weight first stage leaves e₁ = y; a constant y is then
        // cancelled exactly by the compensator after one step.
        let mut g = ConnectionGraph::new(
            vec![
                CascadeGroup::new(
                    vec![ParallelGroup::new(StageModel::LinearRls(LinearRlsState::new(1, 1.0, 1e300).unwrap()))],
                    InputSpec::Raw,
                )
                .unwrap(),
                last_error_group(),
            ],
            10,
        )
        .unwrap();
        for _ in 0..20 {
            g.step(&DVector::zeros(1), 2.5).unwrap();
        }
        assert!(g.errors(2)[1..].iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_group_matches_standalone_filter() {
        let data = stream(1, 300);
        let mut graph = ConnectionGraph::new(vec![raw_group(krls_cfg(2))], 20).unwrap();
        let mut solo = SeriesGroup::new(krls_cfg(2)).unwrap();
        for (x, y) in &data {
            let rec = graph.step(x, *y).unwrap();
            let e = y - solo.predict(x).unwrap();
            solo.learn(x, *y).unwrap();
            assert_eq!(rec.errors[0].to_bits(), e.to_bits());
        }
    }

    #[test]
    fn differencing_identity() {
        let data = stream(2, 400);
        let d = 7;
        let mut groups = vec![raw_group(krls_cfg(2))];
        for _ in 0..d {
            groups.push(last_error_group());
        }
        let mut g = ConnectionGraph::new(groups, 20).unwrap();
        for (x, y) in &data {
            g.step(x, *y).unwrap();
        }
        let mut diff = g.errors(1).to_vec();
        for k in 1..=d {
            diff = diff.windows(2).map(|w| w[1] - w[0]).collect();
            let got = &g.errors(k + 1)[k..];
            assert_eq!(got.len(), diff.len());
            for (a, b) in got.iter().zip(&diff) {
                assert_eq!(a.to_bits(), b.to_bits(), "depth {}", k + 1);
            }
        }
    }

    #[test]
    fn additivity_and_cold_start() {
        let data = stream(3, 50);
        let mut g = ConnectionGraph::new(vec![raw_group(krls_cfg(2)), last_error_group(), last_error_group()], 5).unwrap();
        let x0 = &data[0].0;
        // No history: compensators contribute nothing.
        assert_eq!(g.predict(x0, 3).unwrap(), g.predict(x0, 1).unwrap());
        for (x, y) in &data {
            for d in 2..=3 {
                let lhs = g.predict(x, d).unwrap();
                let rhs = g.predict(x, d - 1).unwrap() + g.group_prediction(x, d).unwrap();
                assert_eq!(lhs, rhs);
            }
            let rec = g.step(x, *y).unwrap();
            assert_eq!(rec.predictions[0], g.predictions(1)[g.len() - 1]);
        }
    }

    #[test]
    fn prediction_never_reads_current_target() {
        let data = stream(4, 80);
        let build = || {
            ConnectionGraph::new(vec![raw_group(krls_cfg(2)), last_error_group()], 5).unwrap()
        };
        let mut a = build();
        let mut b = build();
        for (i, (x, y)) in data.iter().enumerate() {
            let ra = a.step(x, *y).unwrap();
            // Same history, different current target.
            let mut probe = b.clone();
            let rb = probe.step(x, y + 100.0).unwrap();
            assert_eq!(ra.predictions, rb.predictions, "step {i}");
            b.step(x, *y).unwrap();
        }
    }

    #[test]
    fn zeroing_a_stage_only_moves_later_targets() {
        let data = stream(5, 120);
        let centers: Vec<_> = data.iter().step_by(15).map(|(x, _)| x.clone()).collect();
        let frozen = |c: Vec<DVector<f64>>| StageModel::Kernel(SeriesGroup::frozen(krls_cfg(2), c).unwrap());
        let build = |first: StageModel| {
            let stages = vec![
                ParallelGroup::new(first),
                ParallelGroup::new(frozen(centers[3..6].to_vec())),
                ParallelGroup::new(frozen(centers[6..].to_vec())),
            ];
            ConnectionGraph::new(vec![CascadeGroup::new(stages, InputSpec::Raw).unwrap()], 10).unwrap()
        };
        let mut normal = build(frozen(centers[..3].to_vec()));
        // A stage that always predicts 0 stands in for zeroed weights.
        let mut zeroed = build(StageModel::LinearRls(LinearRlsState::new(2, 1.0, 1e300).unwrap()));
        for (x, y) in &data {
            normal.step(x, *y).unwrap();
            zeroed.step(x, *y).unwrap();
        }
        let n = &normal.groups()[0].stages;
        let z = &zeroed.groups()[0].stages;
        assert_eq!(n[0].targets, z[0].targets);
        assert_ne!(n[1].targets, z[1].targets);
        assert_ne!(n[2].targets, z[2].targets);
        assert!(z[0].predictions.iter().all(|&p| p.abs() < 1e-200));
    }

    #[test]
    fn best_depth_cases() {
        assert_eq!(best_depth(&[vec![]], 5), 1);
        assert_eq!(best_depth(&[vec![1.0]], 5), 1);
        let traces = vec![vec![3.0, 3.0], vec![2.0, 2.0], vec![0.5, 0.5], vec![1.0, 1.0]];
        assert_eq!(best_depth(&traces, 2), 3);
        let tie = vec![vec![3.0], vec![1.0], vec![2.0], vec![-1.0]];
        assert_eq!(best_depth(&tie, 1), 2);
        // Only the window counts.
        let windowed = vec![vec![100.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(best_depth(&windowed, 1), 1);
        assert_eq!(best_depth(&windowed, 2), 2);
    }

    #[test]
    fn nonfinite_sample_is_skipped() {
        let mut g = ConnectionGraph::new(vec![raw_group(krls_cfg(2))], 5).unwrap();
        assert!(g.step(&DVector::zeros(2), f64::NAN).is_err());
        assert_eq!(g.len(), 0);
        assert_eq!(g.skipped(), 1);
    }

    #[test]
    fn structural_validation() {
        assert!(CascadeGroup::new(vec![ParallelGroup::new(StageModel::LastError)], InputSpec::Raw).is_err());
        assert!(ConnectionGraph::new(vec![last_error_group()], 5).is_err());
        assert!(ConnectionGraph::new(vec![raw_group(krls_cfg(2)), raw_group(krls_cfg(2))], 5).is_err());
    }

    #[test]
    fn error_channel_export() {
        let data = stream(6, 4);
        let mut g = ConnectionGraph::new(vec![raw_group(krls_cfg(2)), last_error_group()], 5).unwrap();
        for (x, y) in &data {
            g.step(x, *y).unwrap();
        }
        let mut buf = Vec::new();
        write_error_channels(&g, &[10, 11, 12, 13], b',', &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "n,depth,prediction,error");
        assert_eq!(lines.len(), 1 + 8);
        assert!(lines[5].starts_with("10,2,"));
    }
}
