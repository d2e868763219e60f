//! Intermittent precision-matrix optimization of a kernel group with
//! CMA-ES. The search vector `p_σ` enters through the rank-one update
//! `P ← (1 − c0) P ± p_σ p_σᵀ`; each candidate is scored by replaying the
//! group from scratch over an evaluation window.

use nalgebra::DVector;

use super::{optimize, CmaesParams, Termination};
use crate::kernel::{default_learning_rate, GaussianKernel, UpdateSign, DEFAULT_EIGEN_FLOOR};
use crate::topology::{KernelGroupConfig, SeriesGroup};
use crate::{Error, Result};

/// How candidate evaluations treat the dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecisionMode {
    /// Every evaluation re-runs dictionary selection with the candidate
    /// kernel (selection depends on the precision).
    Reselect,
    /// The dictionary is selected once with the incumbent kernel; each
    /// evaluation only retrains weights on it.
    FixedDictionary,
}

/// Weights `ω_σ` of the evaluation window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleWeighting {
    Uniform,
    /// Weight halves every `half_life` samples going back in time.
    Exponential { half_life: f64 },
}

/// Normalised weights for a window of `len` samples, oldest first.
pub fn sample_weights(scheme: SampleWeighting, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::usage("evaluation window is empty"));
    }
    let raw: Vec<f64> = match scheme {
        SampleWeighting::Uniform => vec![1.0; len],
        SampleWeighting::Exponential { half_life } => {
            if !(half_life > 0.0) {
                return Err(Error::usage("half-life must be positive"));
            }
            (0..len)
                .map(|j| 0.5f64.powf((len - 1 - j) as f64 / half_life))
                .collect()
        }
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionSearch {
    pub mode: PrecisionMode,
    /// Shrink rate of the rank-one update; `None` uses `min(2/p², 0.5)`.
    pub c0: Option<f64>,
    pub sign: UpdateSign,
    /// Initial CMA-ES step; `None` uses `0.5·√(trace P / p)`.
    pub sigma0: Option<f64>,
    pub population: Option<usize>,
    pub termination: Termination,
    /// Number of successive optimizations, each starting from the previous
    /// result.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for PrecisionSearch {
    fn default() -> Self {
        PrecisionSearch {
            mode: PrecisionMode::Reselect,
            c0: None,
            sign: UpdateSign::Plus,
            sigma0: None,
            population: None,
            termination: Termination::default(),
            rounds: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrecisionOutcome {
    pub kernel: GaussianKernel,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of the incumbent after each round.
    pub loss_history: Vec<f64>,
    pub accepted_rounds: usize,
    pub evaluations: usize,
    /// Number of full dictionary-selection passes run.
    pub selection_runs: usize,
}

/// Weighted prequential loss `Σ ω_j (y_j − f(x_j))²` of a fresh group
/// replayed over the window. With `centers` the dictionary is fixed.
pub fn replay_loss(
    template: &KernelGroupConfig,
    kernel: &GaussianKernel,
    xs: &[DVector<f64>],
    ys: &[f64],
    omega: &[f64],
    centers: Option<&[DVector<f64>]>,
) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() || omega.len() != ys.len() {
        return Err(Error::usage("evaluation window lengths differ or are zero"));
    }
    if omega.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::usage("sample weights must be non-negative"));
    }
    let cfg = template.with_kernel(kernel.clone());
    let mut group = match centers {
        Some(c) => SeriesGroup::frozen(cfg, c.to_vec())?,
        None => SeriesGroup::new(cfg)?,
    };
    let mut loss = 0.0;
    for ((x, &y), &w) in xs.iter().zip(ys).zip(omega) {
        let e = y - group.predict(x)?;
        loss += w * e * e;
        group.learn(x, y)?;
    }
    if !loss.is_finite() {
        return Err(Error::numeric("replay loss is not finite"));
    }
    Ok(loss)
}

/// Centers chosen by one online selection pass over the window.
pub fn select_centers(template: &KernelGroupConfig, xs: &[DVector<f64>], ys: &[f64]) -> Result<Vec<DVector<f64>>> {
    let mut group = SeriesGroup::new(template.clone())?;
    for (x, &y) in xs.iter().zip(ys) {
        group.learn(x, y)?;
    }
    Ok(group.dictionary().centers().to_vec())
}

/// Objective value of one encoded candidate; failures score `+∞`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_cov_objective(
    template: &KernelGroupConfig,
    incumbent: &GaussianKernel,
    xs: &[DVector<f64>],
    ys: &[f64],
    omega: &[f64],
    p_sigma: &DVector<f64>,
    c0: f64,
    sign: UpdateSign,
    centers: Option<&[DVector<f64>]>,
) -> f64 {
    let candidate = incumbent
        .precision()
        .rank_one_update_with_floor(p_sigma, c0, sign, DEFAULT_EIGEN_FLOOR)
        .and_then(|p| incumbent.with_precision(p));
    match candidate {
        Ok(k) => replay_loss(template, &k, xs, ys, omega, centers).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

/// Re-selects the dictionary for every candidate.
pub fn optimize_precision_ald(
    template: &KernelGroupConfig,
    xs: &[DVector<f64>],
    ys: &[f64],
    omega: &[f64],
    search: &PrecisionSearch,
) -> Result<PrecisionOutcome> {
    run(template, xs, ys, omega, &PrecisionSearch { mode: PrecisionMode::Reselect, ..search.clone() })
}

/// Selects the dictionary once, with the starting kernel, and only
/// retrains weights for each candidate.
pub fn optimize_precision_fixed_dict(
    template: &KernelGroupConfig,
    xs: &[DVector<f64>],
    ys: &[f64],
    omega: &[f64],
    search: &PrecisionSearch,
) -> Result<PrecisionOutcome> {
    run(
        template,
        xs,
        ys,
        omega,
        &PrecisionSearch { mode: PrecisionMode::FixedDictionary, ..search.clone() },
    )
}

/// Dispatches on `search.mode`.
pub fn optimize_precision(
    template: &KernelGroupConfig,
    xs: &[DVector<f64>],
    ys: &[f64],
    omega: &[f64],
    search: &PrecisionSearch,
) -> Result<PrecisionOutcome> {
    run(template, xs, ys, omega, search)
}

fn run(
    template: &KernelGroupConfig,
    xs: &[DVector<f64>],
    ys: &[f64],
    omega: &[f64],
    search: &PrecisionSearch,
) -> Result<PrecisionOutcome> {
    let dim = template.kernel.dim();
    let c0 = search.c0.unwrap_or_else(|| default_learning_rate(dim));
    let params = match search.population {
        Some(l) => CmaesParams::with_population(dim, l)?,
        None => CmaesParams::new(dim)?,
    };

    let mut kernel = template.kernel.clone();
    let mut selection_runs = 0;
    let mut evaluations = 0;
    let mut accepted_rounds = 0;
    let mut history = Vec::with_capacity(search.rounds);
    let mut initial_loss = None;
    let mut loss = f64::INFINITY;

    let centers = match search.mode {
        PrecisionMode::FixedDictionary => {
            selection_runs += 1;
            Some(select_centers(template, xs, ys)?)
        }
        PrecisionMode::Reselect => None,
    };
    for round in 0..search.rounds {
        if search.mode == PrecisionMode::Reselect {
            // Scoring the incumbent is itself a selection pass.
            selection_runs += 1;
        }
        let incumbent_loss = replay_loss(template, &kernel, xs, ys, omega, centers.as_deref())?;
        initial_loss.get_or_insert(incumbent_loss);
        loss = incumbent_loss;

        let p = kernel.precision().matrix();
        let sigma0 = search
            .sigma0
            .unwrap_or_else(|| 0.5 * (p.trace() / dim as f64).sqrt());
        let objective = |v: &DVector<f64>| {
            kernel_cov_objective(template, &kernel, xs, ys, omega, v, c0, search.sign, centers.as_deref())
        };
        let result = match optimize(
            objective,
            DVector::zeros(dim),
            sigma0,
            &params,
            &search.termination,
            search.seed.wrapping_add(round as u64),
        ) {
            Ok(r) => r,
            Err(Error::Optimization(_)) => {
                history.push(loss);
                continue;
            }
            Err(e) => return Err(e),
        };
        evaluations += result.evaluations;
        if search.mode == PrecisionMode::Reselect {
            selection_runs += result.evaluations;
        }
        if result.best_f < incumbent_loss {
            let updated = kernel
                .precision()
                .rank_one_update_with_floor(&result.best_x, c0, search.sign, DEFAULT_EIGEN_FLOOR)?;
            kernel = kernel.with_precision(updated)?;
            loss = result.best_f;
            accepted_rounds += 1;
        }
        history.push(loss);
    }

    Ok(PrecisionOutcome {
        kernel,
        initial_loss: initial_loss.unwrap_or(loss),
        final_loss: loss,
        loss_history: history,
        accepted_rounds,
        evaluations,
        selection_runs,
    })
}
