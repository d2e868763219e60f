//! A series group: one dictionary, one sparsifier, one weight updater.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::dictionary::{AldResult, Dictionary, PIVOT_FLOOR};
use crate::kernel::GaussianKernel;
use crate::weight_update::{KrlsState, MrlsState, RecurrentGradState};
use crate::{Error, Result};

/// Dictionary admission rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Sparsifier {
    /// Admit when the feature-space projection residual exceeds `nu1`.
    Ald { nu1: f64 },
    /// Admit when the nearest center is farther than `nu2` (squared
    /// Euclidean distance); otherwise quantize to that center.
    Distance { nu2: f64 },
    /// Admit when the loss change of the tentative update exceeds `nu3`.
    LossChange { nu3: f64 },
    /// Never admit; the dictionary is fixed at construction.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdaterKind {
    Krls { lambda: f64 },
    Mrls { beta: f64, window: usize, delta: f64 },
    RecurrentGrad { eta: f64, lambda_rec: f64, feedback_lags: Vec<usize> },
}

/// What to do with a sample that qualifies for admission once the
/// dictionary is at its cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FullPolicy {
    #[default]
    Stop,
    Replace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelGroupConfig {
    pub kernel: GaussianKernel,
    pub sparsifier: Sparsifier,
    pub updater: UpdaterKind,
    pub max_size: Option<usize>,
    pub full_policy: FullPolicy,
}

impl KernelGroupConfig {
    pub fn with_kernel(&self, kernel: GaussianKernel) -> Self {
        KernelGroupConfig {
            kernel,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        match self.sparsifier {
            Sparsifier::Ald { nu1: v } | Sparsifier::Distance { nu2: v } | Sparsifier::LossChange { nu3: v } => {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::usage(format!("sparsification threshold must be finite and >= 0, got {v}")));
                }
            }
            Sparsifier::Frozen => {}
        }
        if matches!(self.sparsifier, Sparsifier::LossChange { .. })
            && !matches!(self.updater, UpdaterKind::Krls { .. })
        {
            return Err(Error::usage("the loss-change sparsifier requires the KRLS updater"));
        }
        if self.max_size == Some(0) {
            return Err(Error::usage("dictionary cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum UpdaterState {
    Krls(KrlsState),
    Mrls(MrlsState),
    Grad(RecurrentGradState),
}

/// What happened to the dictionary on a learning step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnEvent {
    Admitted,
    Replaced(usize),
    Updated,
}

#[derive(Clone, Debug)]
pub struct SeriesGroup {
    config: KernelGroupConfig,
    dict: Dictionary,
    state: UpdaterState,
    /// Latest inputs, kept for refreshing the MRLS window.
    recent: VecDeque<DVector<f64>>,
}

impl SeriesGroup {
    /// A group that grows its dictionary online from an empty start.
    pub fn new(config: KernelGroupConfig) -> Result<Self> {
        config.validate()?;
        if config.sparsifier == Sparsifier::Frozen {
            return Err(Error::usage("a frozen group must be built from centers"));
        }
        let dict = Dictionary::new(config.kernel.clone(), config.max_size);
        let state = match &config.updater {
            UpdaterKind::Krls { lambda } => UpdaterState::Krls(KrlsState::new(*lambda)?),
            UpdaterKind::Mrls { beta, window, delta } => UpdaterState::Mrls(MrlsState::new(0, *beta, *window, *delta)?),
            UpdaterKind::RecurrentGrad { eta, lambda_rec, feedback_lags } => {
                UpdaterState::Grad(RecurrentGradState::new(*eta, *lambda_rec, feedback_lags.clone())?)
            }
        };
        Ok(SeriesGroup {
            config,
            dict,
            state,
            recent: VecDeque::new(),
        })
    }

    /// A group over a fixed set of centers that only updates weights.
    pub fn frozen(config: KernelGroupConfig, centers: Vec<DVector<f64>>) -> Result<Self> {
        let config = KernelGroupConfig {
            sparsifier: Sparsifier::Frozen,
            max_size: None,
            ..config
        };
        config.validate()?;
        if centers.is_empty() {
            return Err(Error::usage("a frozen group needs at least one center"));
        }
        let dict = Dictionary::from_centers(config.kernel.clone(), centers, None)?;
        let m = dict.len();
        let state = match &config.updater {
            UpdaterKind::Krls { lambda } => UpdaterState::Krls(KrlsState::with_dictionary(&dict, *lambda)?),
            UpdaterKind::Mrls { beta, window, delta } => UpdaterState::Mrls(MrlsState::new(m, *beta, *window, *delta)?),
            UpdaterKind::RecurrentGrad { eta, lambda_rec, feedback_lags } => {
                let mut s = RecurrentGradState::new(*eta, *lambda_rec, feedback_lags.clone())?;
                for _ in 0..m {
                    s.expand();
                }
                UpdaterState::Grad(s)
            }
        };
        Ok(SeriesGroup {
            config,
            dict,
            state,
            recent: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &KernelGroupConfig {
        &self.config
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn weights(&self) -> &DVector<f64> {
        match &self.state {
            UpdaterState::Krls(s) => s.alpha(),
            UpdaterState::Mrls(s) => s.alpha(),
            UpdaterState::Grad(s) => s.alpha(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dict.input_dim()
    }

    /// Current kernel expansion at `x`; 0 while the dictionary is empty.
    pub fn predict(&self, x: &DVector<f64>) -> Result<f64> {
        let kvec = self.dict.kernel_vector(x)?;
        Ok(kvec.dot(self.weights()))
    }

    /// Sparsify-then-update on one sample.
    pub fn learn(&mut self, x: &DVector<f64>, y: f64) -> Result<LearnEvent> {
        if !y.is_finite() {
            return Err(Error::numeric("non-finite target"));
        }
        let (wants_admission, ald) = self.admission_test(x, y)?;
        if wants_admission && ald.delta1 > PIVOT_FLOOR {
            if !self.dict.is_full() {
                self.dict.ald_admit(x, &ald)?;
                self.after_admit(x, y)?;
                return Ok(LearnEvent::Admitted);
            }
            if self.config.full_policy == FullPolicy::Replace {
                let idx = self.dict.replace_node(&self.weights().clone(), x)?;
                self.after_replace(idx, x, y)?;
                return Ok(LearnEvent::Replaced(idx));
            }
        }
        self.plain_update(x, y, &ald)?;
        Ok(LearnEvent::Updated)
    }

    /// Returns whether `x` qualifies for admission together with its ALD
    /// projection (needed by the admission itself and by KRLS).
    fn admission_test(&self, x: &DVector<f64>, y: f64) -> Result<(bool, AldResult)> {
        if self.dict.is_empty() {
            // Validates x before the first admission.
            self.dict.kernel_vector(x)?;
            return Ok((true, AldResult::empty()));
        }
        match &self.config.sparsifier {
            Sparsifier::Ald { nu1 } => {
                let ald = self.dict.ald_test(x)?;
                Ok((ald.delta1 > *nu1, ald))
            }
            Sparsifier::Distance { nu2 } => {
                let (_, d2) = self.dict.distance_test(x)?;
                let ald = self.dict.ald_test(x)?;
                Ok((d2 > *nu2, ald))
            }
            Sparsifier::LossChange { nu3 } => {
                let ald = self.dict.ald_test(x)?;
                let UpdaterState::Krls(s) = &self.state else {
                    unreachable!("validated at construction")
                };
                let da = s.tentative_delta(&self.dict, &ald.alpha, y)?;
                // ½ Δαᵀ(K̃ᵀK̃ + λI)Δα without forming the matrix.
                let kd = self.dict.gram() * &da;
                let delta3 = 0.5 * (kd.norm_squared() + s.lambda() * da.norm_squared());
                Ok((delta3 > *nu3, ald))
            }
            Sparsifier::Frozen => Ok((false, self.dict.ald_test(x)?)),
        }
    }

    fn after_admit(&mut self, x: &DVector<f64>, y: f64) -> Result<()> {
        match &mut self.state {
            UpdaterState::Krls(s) => s.admit(&self.dict, y),
            UpdaterState::Mrls(s) => {
                s.expand();
                let fresh: Vec<_> = self.recent.iter().map(|r| self.dict.kvec_unchecked(r)).collect();
                s.refresh_kvecs(fresh)?;
                self.mrls_step(x, y)
            }
            UpdaterState::Grad(s) => {
                s.expand();
                s.step(&self.dict, x, y).map(|_| ())
            }
        }
    }

    fn after_replace(&mut self, idx: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        match &mut self.state {
            UpdaterState::Krls(s) => s.replace(&self.dict, idx, y),
            UpdaterState::Mrls(s) => {
                s.reset_slot(idx)?;
                let fresh: Vec<_> = self.recent.iter().map(|r| self.dict.kvec_unchecked(r)).collect();
                s.refresh_kvecs(fresh)?;
                self.mrls_step(x, y)
            }
            UpdaterState::Grad(s) => {
                s.reset_slot(idx)?;
                s.step(&self.dict, x, y).map(|_| ())
            }
        }
    }

    fn plain_update(&mut self, x: &DVector<f64>, y: f64, ald: &AldResult) -> Result<()> {
        match &mut self.state {
            UpdaterState::Krls(s) => {
                if let Sparsifier::Distance { .. } = self.config.sparsifier {
                    // Quantized: the sample is represented by its nearest node.
                    let (j, _) = self.dict.distance_test(x)?;
                    let mut a = DVector::zeros(self.dict.len());
                    a[j] = 1.0;
                    s.update(&self.dict, &a, y)
                } else {
                    s.update(&self.dict, &ald.alpha, y)
                }
            }
            UpdaterState::Mrls(_) => self.mrls_step(x, y),
            UpdaterState::Grad(s) => s.step(&self.dict, x, y).map(|_| ()),
        }
    }

    fn mrls_step(&mut self, x: &DVector<f64>, y: f64) -> Result<()> {
        let UpdaterState::Mrls(s) = &mut self.state else {
            unreachable!()
        };
        let kvec = self.dict.kvec_unchecked(x);
        s.step(kvec, y)?;
        let cap = match self.config.updater {
            UpdaterKind::Mrls { window, .. } => window,
            _ => unreachable!(),
        };
        if self.recent.len() == cap {
            self.recent.pop_front();
        }
        self.recent.push_back(x.clone());
        Ok(())
    }
}

/// `0.1 · median²` of the pairwise Euclidean distances, the default
/// quantization threshold. Uses at most `max_points` evenly spaced inputs.
pub fn default_distance_threshold(xs: &[DVector<f64>], max_points: usize) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::usage("need at least two inputs for a distance threshold"));
    }
    let stride = xs.len().div_ceil(max_points.max(2));
    let pts: Vec<&DVector<f64>> = xs.iter().step_by(stride.max(1)).collect();
    let mut d2: Vec<f64> = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            d2.push((pts[i] - pts[j]).norm_squared());
        }
    }
    let mid = d2.len() / 2;
    let (_, median, _) = d2.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Ok(0.1 * *median)
}
