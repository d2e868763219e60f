//! Covariance matrix adaptation evolution strategy (positive recombination
//! weights, rank-one plus rank-μ covariance update, cumulative step-size
//! control).

pub mod precision;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::linalg::{from_eigen, sym_eigen, symmetrize};
use crate::{Error, Result};

/// Strategy constants. Fields are public so that callers can run the
/// update rules with non-default rates.
#[derive(Clone, Debug, PartialEq)]
pub struct CmaesParams {
    pub dim: usize,
    pub lambda: usize,
    pub mu: usize,
    /// Recombination weights for the best `mu`, positive and summing to 1.
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_m: f64,
    pub c1: f64,
    pub c_mu: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub chi_n: f64,
}

impl CmaesParams {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::usage("CMA-ES needs at least one dimension"));
        }
        let lambda = 4 + (3.0 * (dim as f64).ln()).floor() as usize;
        Self::with_population(dim, lambda)
    }

    pub fn with_population(dim: usize, lambda: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::usage("CMA-ES needs at least one dimension"));
        }
        if lambda < 2 {
            return Err(Error::usage("population must hold at least two candidates"));
        }
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + c_sigma + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0);
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(CmaesParams {
            dim,
            lambda,
            mu,
            weights,
            mu_eff,
            c_m: 1.0,
            c1,
            c_mu,
            c_sigma,
            d_sigma,
            c_c,
            chi_n,
        })
    }
}

/// Distribution state of one run.
#[derive(Clone, Debug)]
pub struct CmaesState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_c: DVector<f64>,
    pub p_sigma: DVector<f64>,
    pub generation: usize,
    rng: ChaCha8Rng,
}

impl CmaesState {
    pub fn new(x0: DVector<f64>, sigma0: f64, seed: u64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::usage(format!("initial step size must be positive, got {sigma0}")));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("initial mean must be finite"));
        }
        let n = x0.len();
        Ok(CmaesState {
            mean: x0,
            sigma: sigma0,
            cov: DMatrix::identity(n, n),
            p_c: DVector::zeros(n),
            p_sigma: DVector::zeros(n),
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `lambda` candidates `m + σ B D z`.
    pub fn sample_population(&mut self, params: &CmaesParams) -> Vec<DVector<f64>> {
        let (vals, vecs) = sym_eigen(&self.cov);
        let n = self.dim();
        let scale = DVector::from_iterator(n, vals.iter().map(|v| v.max(0.0).sqrt()));
        (0..params.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut self.rng));
                let dz = z.component_mul(&scale);
                &self.mean + (&vecs * dz) * self.sigma
            })
            .collect()
    }

    /// One generation update from a population and its ranking.
    pub fn tell(&mut self, params: &CmaesParams, population: &[DVector<f64>], order: &[usize]) -> Result<()> {
        if order.len() < params.mu || population.len() != params.lambda {
            return Err(Error::usage("population or ranking does not match the strategy"));
        }
        let selected = &order[..params.mu];
        let old_mean = self.mean.clone();
        let new_mean = update_mean(&old_mean, population, selected, params);
        let shift = (&new_mean - &old_mean) / self.sigma;

        let (vals, vecs) = sym_eigen(&self.cov);
        let inv_sqrt = DVector::from_iterator(vals.len(), vals.iter().map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()));
        let c_inv_sqrt = from_eigen(&inv_sqrt, &vecs);

        let cs = params.c_sigma;
        self.p_sigma = &self.p_sigma * (1.0 - cs) + (&c_inv_sqrt * &shift) * (cs * (2.0 - cs) * params.mu_eff).sqrt();
        let decay = 1.0 - (1.0 - cs).powi(2 * (self.generation as i32 + 1));
        let h_sigma =
            self.p_sigma.norm() / decay.sqrt() < (1.4 + 2.0 / (params.dim as f64 + 1.0)) * params.chi_n;

        let cc = params.c_c;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - cc) + &shift * (h * (cc * (2.0 - cc) * params.mu_eff).sqrt());

        let steps: Vec<DVector<f64>> = selected
            .iter()
            .map(|&k| (&population[k] - &old_mean) / self.sigma)
            .collect();
        self.cov = update_covariance(&self.cov, &self.p_c, &steps, params, h_sigma);
        self.sigma = update_step_size(self.sigma, &self.p_sigma, params);
        self.mean = new_mean;
        self.generation += 1;
        Ok(())
    }
}

/// Indices in ascending objective order; non-finite values rank last and
/// ties keep sample order.
pub fn rank_and_select(values: &[f64]) -> Result<Vec<usize>> {
    if values.iter().all(|v| !v.is_finite()) {
        return Err(Error::Optimization(
            "every candidate in the generation failed to evaluate".into(),
        ));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (values[a], values[b]);
        match (va.is_finite(), vb.is_finite()) {
            (true, true) => va.partial_cmp(&vb).expect("finite values compare"),
            (true, false) => std::cmp::Ordering::Less,
            (false, true) => std::cmp::Ordering::Greater,
            (false, false) => std::cmp::Ordering::Equal,
        }
    });
    Ok(order)
}

/// Weighted recombination `m + c_m Σ w_i (x_{k(i)} − m)`.
pub fn update_mean(
    mean: &DVector<f64>,
    population: &[DVector<f64>],
    selected: &[usize],
    params: &CmaesParams,
) -> DVector<f64> {
    let mut step = DVector::zeros(mean.len());
    for (w, &k) in params.weights.iter().zip(selected) {
        step += (&population[k] - mean) * *w;
    }
    mean + step * params.c_m
}

/// Rank-one plus rank-μ covariance update. `steps` are the selected
/// `(x − m)/σ` in rank order.
pub fn update_covariance(
    cov: &DMatrix<f64>,
    p_c: &DVector<f64>,
    steps: &[DVector<f64>],
    params: &CmaesParams,
    h_sigma: bool,
) -> DMatrix<f64> {
    let wsum: f64 = params.weights.iter().take(steps.len()).sum();
    let mut next = cov * (1.0 - params.c1 - params.c_mu * wsum);
    let mut rank_one = p_c * p_c.transpose();
    if !h_sigma {
        rank_one += cov * (params.c_c * (2.0 - params.c_c));
    }
    next += rank_one * params.c1;
    for (w, y) in params.weights.iter().zip(steps) {
        next.ger(params.c_mu * w, y, y, 1.0);
    }
    symmetrize(&next)
}

/// Cumulative step-size adaptation.
pub fn update_step_size(sigma: f64, p_sigma: &DVector<f64>, params: &CmaesParams) -> f64 {
    sigma * ((params.c_sigma / params.d_sigma) * (p_sigma.norm() / params.chi_n - 1.0)).exp()
}

/// Stopping rules; every set rule is checked after each generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Termination {
    pub max_generations: Option<usize>,
    pub max_evaluations: Option<usize>,
    pub target_f: Option<f64>,
    pub min_sigma: Option<f64>,
    /// Stop when the best value improved by less than this relative amount
    /// over this many generations.
    pub stagnation: Option<(usize, f64)>,
}

impl Default for Termination {
    fn default() -> Self {
        Termination {
            max_generations: Some(20),
            max_evaluations: None,
            target_f: None,
            min_sigma: None,
            stagnation: Some((5, 1e-4)),
        }
    }
}

impl Termination {
    pub fn generations(g: usize) -> Self {
        Termination {
            max_generations: Some(g),
            max_evaluations: None,
            target_f: None,
            min_sigma: None,
            stagnation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Generations,
    Evaluations,
    Target,
    Sigma,
    Stagnation,
}

#[derive(Clone, Debug)]
pub struct GenerationRecord {
    pub best_f: f64,
    pub sigma: f64,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub best_x: DVector<f64>,
    pub best_f: f64,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
    pub final_state: CmaesState,
    pub reason: StopReason,
}

/// Minimises `objective` from `x0`. Candidates of one generation are
/// evaluated in parallel; sampling stays sequential so results do not
/// depend on the thread count. A non-finite objective value counts as a
/// failed evaluation.
pub fn optimize<F>(
    objective: F,
    x0: DVector<f64>,
    sigma0: f64,
    params: &CmaesParams,
    termination: &Termination,
    seed: u64,
) -> Result<OptimizeResult>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if x0.len() != params.dim {
        return Err(Error::usage("initial mean does not match the strategy dimension"));
    }
    let mut state = CmaesState::new(x0.clone(), sigma0, seed)?;
    let mut best_x = x0;
    let mut best_f = f64::INFINITY;
    let mut history: Vec<GenerationRecord> = Vec::new();
    let mut evaluations = 0;

    let reason = loop {
        if termination.max_generations.is_some_and(|g| state.generation >= g) {
            break StopReason::Generations;
        }
        if termination
            .max_evaluations
            .is_some_and(|e| evaluations + params.lambda > e)
        {
            break StopReason::Evaluations;
        }
        let population = state.sample_population(params);
        let values: Vec<f64> = population.par_iter().map(&objective).collect();
        evaluations += values.len();
        let order = rank_and_select(&values)?;
        let gen_best = values[order[0]];
        if gen_best < best_f {
            best_f = gen_best;
            best_x = population[order[0]].clone();
        }
        state.tell(params, &population, &order)?;
        history.push(GenerationRecord {
            best_f: gen_best,
            sigma: state.sigma,
            selected: order[..params.mu].to_vec(),
        });

        if termination.target_f.is_some_and(|t| best_f <= t) {
            break StopReason::Target;
        }
        if termination.min_sigma.is_some_and(|s| state.sigma < s) {
            break StopReason::Sigma;
        }
        if let Some((window, tol)) = termination.stagnation {
            if history.len() > window {
                let old = history[..history.len() - window]
                    .iter()
                    .map(|r| r.best_f)
                    .fold(f64::INFINITY, f64::min);
                if old.is_finite() && old - best_f <= tol * old.abs() {
                    break StopReason::Stagnation;
                }
            }
        }
    };

    Ok(OptimizeResult {
        best_x,
        best_f,
        history,
        evaluations,
        final_state: state,
        reason,
    })
}
