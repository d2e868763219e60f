//! Online weight updaters for kernel expansions and linear stages.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::dictionary::Dictionary;
use crate::linalg::{min_eigenvalue, spd_inverse_or_pinv, symmetrize};
use crate::{Error, Result};

/// Default ridge on the kernel weights.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Default `δ` in the initial inverse covariance `δ⁻¹ I`.
pub const DEFAULT_P_DELTA: f64 = 1e-3;

/// Kernel RLS on a sparsified dictionary.
///
/// Every sample `n` contributes a row `a_n` of the coefficient matrix `A`:
/// the unit vector of its own slot when it was admitted, otherwise its
/// projection coefficients onto the dictionary (or the quantized node's
/// unit vector). The weights minimise
/// `‖y − A K̃ α̃‖² + λ‖α̃‖²` over everything seen so far.
///
/// Internally the recursion runs on `β = K̃ α̃`, where the problem is an
/// ordinary regularized least squares in `A` with
/// `Q = (AᵀA + λ K̃⁻²)⁻¹`.
#[derive(Clone, Debug)]
pub struct KrlsState {
    alpha: DVector<f64>,
    beta: DVector<f64>,
    q: DMatrix<f64>,
    ata: DMatrix<f64>,
    aty: DVector<f64>,
    lambda: f64,
    fallbacks: usize,
}

impl KrlsState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::usage(format!("ridge must be finite and >= 0, got {lambda}")));
        }
        Ok(KrlsState {
            alpha: DVector::zeros(0),
            beta: DVector::zeros(0),
            q: DMatrix::zeros(0, 0),
            ata: DMatrix::zeros(0, 0),
            aty: DVector::zeros(0),
            lambda,
            fallbacks: 0,
        })
    }

    /// Starts from an existing dictionary with no samples seen. The ridge
    /// is what keeps the initial problem well posed, so it must be positive.
    pub fn with_dictionary(dict: &Dictionary, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::usage("a pre-built dictionary needs a positive ridge"));
        }
        let m = dict.len();
        let mut state = KrlsState::new(lambda)?;
        state.alpha = DVector::zeros(m);
        state.ata = DMatrix::zeros(m, m);
        state.aty = DVector::zeros(m);
        state.recompute(dict);
        state.alpha = dict.gram_inverse() * &state.beta;
        Ok(state)
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `(AᵀA + λK̃⁻²)⁻¹`; equals `(AᵀA)⁻¹` when λ = 0.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Number of solves that needed the pseudo-inverse fallback.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    pub fn predict(&self, kvec: &DVector<f64>) -> f64 {
        kvec.dot(&self.alpha)
    }

    fn check(&self, dict: &Dictionary, expected: usize) -> Result<()> {
        if dict.len() != expected {
            return Err(Error::usage(format!(
                "KRLS state expects a dictionary of {expected} nodes, got {}",
                dict.len()
            )));
        }
        Ok(())
    }

    /// Incorporates a sample that was just admitted as the last node of
    /// `dict`.
    pub fn admit(&mut self, dict: &Dictionary, y: f64) -> Result<()> {
        let m = self.len();
        self.check(dict, m + 1)?;
        let mut ata = self.ata.clone().resize(m + 1, m + 1, 0.0);
        ata[(m, m)] = 1.0;
        self.ata = ata;
        self.aty = self.aty.clone().push(y);
        if self.lambda == 0.0 {
            // Block-diagonal growth is exact without the ridge.
            let mut q = self.q.clone().resize(m + 1, m + 1, 0.0);
            q[(m, m)] = 1.0;
            self.q = q;
            self.beta = self.beta.clone().push(y);
        } else {
            self.recompute(dict);
        }
        self.alpha = dict.gram_inverse() * &self.beta;
        Ok(())
    }

    /// Change in `α̃` that [`update`](Self::update) would apply.
    pub fn tentative_delta(&self, dict: &Dictionary, a: &DVector<f64>, y: f64) -> Result<DVector<f64>> {
        self.check(dict, self.len())?;
        if a.len() != self.len() {
            return Err(Error::usage("regressor length does not match the dictionary"));
        }
        let pi = &self.q * a;
        let gamma = 1.0 + a.dot(&pi);
        let gain = (y - a.dot(&self.beta)) / gamma;
        Ok(dict.gram_inverse() * (pi * gain))
    }

    /// Incorporates a sample that was not admitted, with regressor row `a`.
    pub fn update(&mut self, dict: &Dictionary, a: &DVector<f64>, y: f64) -> Result<()> {
        self.check(dict, self.len())?;
        if a.len() != self.len() {
            return Err(Error::usage("regressor length does not match the dictionary"));
        }
        let pi = &self.q * a;
        let gamma = 1.0 + a.dot(&pi);
        let innovation = y - a.dot(&self.beta);
        self.beta.axpy(innovation / gamma, &pi, 1.0);
        self.q.ger(-1.0 / gamma, &pi, &pi, 1.0);
        self.ata.ger(1.0, a, a, 1.0);
        self.aty.axpy(y, a, 1.0);
        self.alpha = dict.gram_inverse() * &self.beta;
        Ok(())
    }

    /// Restarts the bookkeeping of slot `idx` after its node was replaced:
    /// the slot keeps only the new sample `y`.
    pub fn replace(&mut self, dict: &Dictionary, idx: usize, y: f64) -> Result<()> {
        self.check(dict, self.len())?;
        if idx >= self.len() {
            return Err(Error::usage("replacement index out of range"));
        }
        self.ata.row_mut(idx).fill(0.0);
        self.ata.column_mut(idx).fill(0.0);
        self.ata[(idx, idx)] = 1.0;
        self.aty[idx] = y;
        self.recompute(dict);
        self.alpha = dict.gram_inverse() * &self.beta;
        Ok(())
    }

    /// Rebuilds `Q` and `β` from the accumulated normal equations, e.g.
    /// after the kernel shape changed.
    pub fn rebuild(&mut self, dict: &Dictionary) -> Result<()> {
        self.check(dict, self.len())?;
        self.recompute(dict);
        self.alpha = dict.gram_inverse() * &self.beta;
        Ok(())
    }

    fn recompute(&mut self, dict: &Dictionary) {
        let g = dict.gram_inverse();
        let mut normal = self.ata.clone();
        if self.lambda > 0.0 {
            normal += (g * g) * self.lambda;
        }
        let (q, fallback) = spd_inverse_or_pinv(&symmetrize(&normal));
        if fallback {
            self.fallbacks += 1;
        }
        self.beta = &q * &self.aty;
        self.q = q;
    }
}

/// Multi-innovation RLS with exponential forgetting over the latest `p`
/// samples.
#[derive(Clone, Debug)]
pub struct MrlsState {
    alpha: DVector<f64>,
    p_mat: DMatrix<f64>,
    beta: f64,
    window_len: usize,
    delta: f64,
    window: VecDeque<(DVector<f64>, f64)>,
}

impl MrlsState {
    pub fn new(dim: usize, beta: f64, window_len: usize, delta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::usage(format!("forgetting factor must lie in (0,1], got {beta}")));
        }
        if window_len == 0 {
            return Err(Error::usage("innovation window must hold at least one sample"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::usage("initial covariance scale must be positive"));
        }
        Ok(MrlsState {
            alpha: DVector::zeros(dim),
            p_mat: DMatrix::identity(dim, dim) / delta,
            beta,
            window_len,
            delta,
            window: VecDeque::with_capacity(window_len),
        })
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p_mat
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn predict(&self, kvec: &DVector<f64>) -> f64 {
        kvec.dot(&self.alpha)
    }

    /// Adds a weight slot for a newly admitted node.
    pub fn expand(&mut self) {
        let m = self.len();
        self.alpha = self.alpha.clone().push(0.0);
        let mut p = self.p_mat.clone().resize(m + 1, m + 1, 0.0);
        p[(m, m)] = 1.0 / self.delta;
        self.p_mat = p;
        for (k, _) in self.window.iter_mut() {
            *k = k.clone().push(0.0);
        }
    }

    /// Resets slot `idx` after node replacement.
    pub fn reset_slot(&mut self, idx: usize) -> Result<()> {
        if idx >= self.len() {
            return Err(Error::usage("replacement index out of range"));
        }
        self.alpha[idx] = 0.0;
        self.p_mat.row_mut(idx).fill(0.0);
        self.p_mat.column_mut(idx).fill(0.0);
        self.p_mat[(idx, idx)] = 1.0 / self.delta;
        Ok(())
    }

    /// Replaces the stored kernel vectors of the window, oldest first,
    /// e.g. after the dictionary changed.
    pub fn refresh_kvecs(&mut self, kvecs: Vec<DVector<f64>>) -> Result<()> {
        if kvecs.len() != self.window.len() || kvecs.iter().any(|k| k.len() != self.len()) {
            return Err(Error::usage("refreshed window does not match the state"));
        }
        for ((k, _), fresh) in self.window.iter_mut().zip(kvecs) {
            *k = fresh;
        }
        Ok(())
    }

    /// One update with the newest kernel vector; returns the a-priori
    /// error of the newest sample. On a singular innovation matrix the
    /// state is left untouched.
    pub fn step(&mut self, kvec: DVector<f64>, y: f64) -> Result<f64> {
        if kvec.len() != self.len() {
            return Err(Error::usage(format!(
                "kernel vector of length {} for {} weights",
                kvec.len(),
                self.len()
            )));
        }
        let mut window = self.window.clone();
        if window.len() == self.window_len {
            window.pop_front();
        }
        window.push_back((kvec, y));

        let p = window.len();
        let m = self.len();
        let kp = DMatrix::from_fn(p, m, |r, c| window[r].0[c]);
        let yp = DVector::from_iterator(p, window.iter().map(|(_, y)| *y));
        let ep = yp - &kp * &self.alpha;
        let newest_error = ep[p - 1];

        let pk = &self.p_mat * kp.transpose();
        let s = DMatrix::identity(p, p) * self.beta + &kp * &pk;
        let chol = symmetrize(&s)
            .cholesky()
            .ok_or_else(|| Error::numeric("MRLS innovation matrix is singular"))?;
        // Ψ = P Kᵀ S⁻¹, computed as (S⁻¹ K P)ᵀ.
        let psi = chol.solve(&pk.transpose()).transpose();
        let p_next = (&self.p_mat - &psi * pk.transpose()) / self.beta;

        self.alpha += &psi * ep;
        self.p_mat = symmetrize(&p_next);
        self.window = window;
        Ok(newest_error)
    }
}

/// Kernel LMS with a truncated recurrent correction for inputs that feed
/// back the filter's own past output.
#[derive(Clone, Debug)]
pub struct RecurrentGradState {
    alpha: DVector<f64>,
    eta: f64,
    lambda_rec: f64,
    feedback_lags: Vec<usize>,
    prev_input: Option<DVector<f64>>,
}

impl RecurrentGradState {
    pub fn new(eta: f64, lambda_rec: f64, feedback_lags: Vec<usize>) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::usage(format!("learning rate must be positive, got {eta}")));
        }
        if !lambda_rec.is_finite() {
            return Err(Error::usage("recurrent gain must be finite"));
        }
        Ok(RecurrentGradState {
            alpha: DVector::zeros(0),
            eta,
            lambda_rec,
            feedback_lags,
            prev_input: None,
        })
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn predict(&self, kvec: &DVector<f64>) -> f64 {
        kvec.dot(&self.alpha)
    }

    pub fn expand(&mut self) {
        self.alpha = self.alpha.clone().push(0.0);
    }

    pub fn reset_slot(&mut self, idx: usize) -> Result<()> {
        if idx >= self.len() {
            return Err(Error::usage("replacement index out of range"));
        }
        self.alpha[idx] = 0.0;
        Ok(())
    }

    /// Gradient of `e²` with respect to the weights. The feedback inputs
    /// of `x` are treated as functions of the weights through the
    /// previous step's prediction only.
    pub fn gradient(&self, dict: &Dictionary, x: &DVector<f64>, y: f64) -> Result<DVector<f64>> {
        let kvec = dict.kernel_vector(x)?;
        if kvec.len() != self.len() {
            return Err(Error::usage("weight vector does not match the dictionary"));
        }
        if let Some(&bad) = self.feedback_lags.iter().find(|&&l| l >= x.len()) {
            return Err(Error::usage(format!("feedback lag {bad} outside the input")));
        }
        let e = y - kvec.dot(&self.alpha);
        let mut grad = &kvec * (-2.0 * e);
        if self.lambda_rec != 0.0 && !self.feedback_lags.is_empty() && e != 0.0 {
            if let Some(prev) = &self.prev_input {
                let prev_kvec = dict.kvec_unchecked(prev);
                // J = ∂k̃/∂α = Σ_l (∂k̃/∂x_l) prev_kvecᵀ, so Jᵀ(−2eα) is
                // prev_kvec scaled by Σ_l (∂k̃/∂x_l)ᵀ(−2eα).
                let mut s = 0.0;
                for (i, c) in dict.centers().iter().enumerate() {
                    let gx = dict.kernel().grad_x(x, c);
                    let dk: f64 = self.feedback_lags.iter().map(|&l| gx[l]).sum();
                    s += dk * self.alpha[i];
                }
                grad.axpy(-2.0 * e * s * self.lambda_rec, &prev_kvec, 1.0);
            }
        }
        Ok(grad)
    }

    /// One gradient step; returns the a-priori error.
    pub fn step(&mut self, dict: &Dictionary, x: &DVector<f64>, y: f64) -> Result<f64> {
        let grad = self.gradient(dict, x, y)?;
        let e = y - dict.kvec_unchecked(x).dot(&self.alpha);
        self.alpha.axpy(-self.eta, &grad, 1.0);
        self.prev_input = Some(x.clone());
        Ok(e)
    }
}

/// Exponentially weighted linear RLS.
#[derive(Clone, Debug)]
pub struct LinearRlsState {
    theta: DVector<f64>,
    p_mat: DMatrix<f64>,
    beta2: f64,
}

impl LinearRlsState {
    pub fn new(dim: usize, beta2: f64, delta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::usage("linear RLS needs at least one regressor"));
        }
        if !(beta2 > 0.0 && beta2 <= 1.0) {
            return Err(Error::usage(format!("forgetting factor must lie in (0,1], got {beta2}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::usage("initial covariance scale must be positive"));
        }
        Ok(LinearRlsState {
            theta: DVector::zeros(dim),
            p_mat: DMatrix::identity(dim, dim) / delta,
            beta2,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p_mat
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.theta)
    }

    /// One update; returns the a-priori error.
    pub fn step(&mut self, x: &DVector<f64>, y: f64) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::usage(format!(
                "regressor of length {} for {} coefficients",
                x.len(),
                self.dim()
            )));
        }
        let e = y - x.dot(&self.theta);
        let px = &self.p_mat * x;
        let denom = self.beta2 + x.dot(&px);
        let k = &px / denom;
        self.theta.axpy(e, &k, 1.0);
        let mut p = self.p_mat.clone();
        p.ger(-1.0, &k, &px, 1.0);
        self.p_mat = symmetrize(&(p / self.beta2));
        Ok(e)
    }
}

/// Dense `argmin_w ‖y − A w‖² + λ‖w‖²` through the normal equations.
pub fn batch_ls(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if a.nrows() != y.len() {
        return Err(Error::usage("row count of A does not match y"));
    }
    if lambda < 0.0 {
        return Err(Error::usage("ridge must be non-negative"));
    }
    let n = a.ncols();
    let normal = symmetrize(&(a.transpose() * a + DMatrix::identity(n, n) * lambda));
    if lambda == 0.0 {
        let top = normal.diagonal().amax();
        if n > 0 && min_eigenvalue(&normal) <= 1e-12 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::numeric("design matrix is rank deficient"));
        }
    }
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::numeric("normal equations are not positive definite"))?;
    Ok(chol.solve(&(a.transpose() * y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::AldResult;
    use crate::kernel::GaussianKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-r..r))
    }

    /// Runs ALD-KRLS and returns, after each step, the state alongside
    /// the recorded regressor rows.
    struct Run {
        dict: Dictionary,
        state: KrlsState,
        rows: Vec<DVector<f64>>,
        ys: Vec<f64>,
    }

    impl Run {
        fn new(kernel: GaussianKernel, lambda: f64) -> Self {
            Run {
                dict: Dictionary::new(kernel, Some(10)),
                state: KrlsState::new(lambda).unwrap(),
                rows: Vec::new(),
                ys: Vec::new(),
            }
        }

        fn push(&mut self, x: &DVector<f64>, y: f64, nu: f64) {
            let ald = if self.dict.is_empty() {
                AldResult::empty()
            } else {
                self.dict.ald_test(x).unwrap()
            };
            if (self.dict.is_empty() || ald.delta1 > nu) && !self.dict.is_full() {
                self.dict.ald_admit(x, &ald).unwrap();
                self.state.admit(&self.dict, y).unwrap();
                for r in &mut self.rows {
                    *r = r.clone().push(0.0);
                }
                let m = self.dict.len();
                let mut e = DVector::zeros(m);
                e[m - 1] = 1.0;
                self.rows.push(e);
            } else {
                self.state.update(&self.dict, &ald.alpha, y).unwrap();
                self.rows.push(ald.alpha.clone());
            }
            self.ys.push(y);
        }

        fn oracle(&self) -> DVector<f64> {
            let m = self.dict.len();
            let a = DMatrix::from_fn(self.rows.len(), m, |r, c| self.rows[r][c]);
            batch_ls(&(a * self.dict.gram()), &DVector::from_column_slice(&self.ys), self.state.lambda())
                .unwrap()
        }
    }

    #[test]
    fn krls_first_sample() {
        let k = GaussianKernel::isotropic(2, 1.0, 1.0).unwrap();
        for lambda in [0.0, 0.5] {
            let mut run = Run::new(k.clone(), lambda);
            run.push(&DVector::from_column_slice(&[0.2, 0.4]), 3.0, 0.01);
            assert!((run.state.alpha()[0] - 3.0 / (1.0 + lambda)).abs() < 1e-15);
        }
    }

    #[test]
    fn krls_tracks_batch_solution() {
        let k = GaussianKernel::isotropic(2, 1.0, 1.0).unwrap();
        for lambda in [0.0, 1e-3] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut run = Run::new(k.clone(), lambda);
            for _ in 0..30 {
                let x = random_vec(&mut rng, 2, 2.0);
                let y = x[0].sin() * x[1] + 0.1 * rng.random_range(-1.0..1.0);
                run.push(&x, y, 0.1);
                let diff = (run.state.alpha() - run.oracle()).amax();
                assert!(diff <= 1e-7, "lambda {lambda}: {diff}");
            }
        }
    }

    #[test]
    fn krls_repeated_sample_fits_target() {
        let k = GaussianKernel::isotropic(1, 1.0, 1.0).unwrap();
        let mut run = Run::new(k, 0.0);
        let x = DVector::from_column_slice(&[0.5]);
        for _ in 0..20 {
            run.push(&x, 2.0, 0.01);
        }
        assert_eq!(run.dict.len(), 1);
        assert!((run.state.alpha()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn krls_tentative_delta_matches_update() {
        let k = GaussianKernel::isotropic(2, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut run = Run::new(k, 1e-4);
        for _ in 0..15 {
            let x = random_vec(&mut rng, 2, 2.0);
            run.push(&x, x[0], 0.05);
        }
        let x = DVector::from_column_slice(&[0.1, 0.1]);
        let ald = run.dict.ald_test(&x).unwrap();
        let before = run.state.alpha().clone();
        let delta = run.state.tentative_delta(&run.dict, &ald.alpha, 0.7).unwrap();
        run.state.update(&run.dict, &ald.alpha, 0.7).unwrap();
        assert!((run.state.alpha() - before - delta).amax() < 1e-10);
    }

    #[test]
    fn krls_rejects_mismatched_dictionary() {
        let k = GaussianKernel::isotropic(1, 1.0, 1.0).unwrap();
        let d = Dictionary::new(k, None);
        let mut s = KrlsState::new(0.0).unwrap();
        assert!(matches!(s.admit(&d, 1.0), Err(Error::Usage(_))));
        assert!(KrlsState::new(-1.0).is_err());
    }

    /// Textbook RLS written out element by element.
    fn classical_rls(phis: &[DVector<f64>], ys: &[f64], delta: f64) -> Vec<(DVector<f64>, f64)> {
        let m = phis[0].len();
        let mut w = vec![0.0; m];
        let mut p = vec![vec![0.0; m]; m];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = 1.0 / delta;
        }
        let mut out = Vec::new();
        for (phi, &y) in phis.iter().zip(ys) {
            let e: f64 = y - (0..m).map(|i| phi[i] * w[i]).sum::<f64>();
            let pphi: Vec<f64> = (0..m).map(|i| (0..m).map(|j| p[i][j] * phi[j]).sum()).collect();
            let denom = 1.0 + (0..m).map(|i| phi[i] * pphi[i]).sum::<f64>();
            let k: Vec<f64> = pphi.iter().map(|v| v / denom).collect();
            for i in 0..m {
                w[i] += k[i] * e;
            }
            let mut np = p.clone();
            for i in 0..m {
                for j in 0..m {
                    np[i][j] = p[i][j] - k[i] * pphi[j];
                }
            }
            p = np;
            out.push((DVector::from_vec(w.clone()), e));
        }
        out
    }

    #[test]
    fn mrls_reduces_to_classical_rls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phis: Vec<_> = (0..50).map(|_| random_vec(&mut rng, 4, 1.0)).collect();
        let ys: Vec<f64> = phis.iter().map(|p| p[0] - 0.5 * p[2] + 0.05 * p[3].sin()).collect();
        let oracle = classical_rls(&phis, &ys, DEFAULT_P_DELTA);
        let mut s = MrlsState::new(4, 1.0, 1, DEFAULT_P_DELTA).unwrap();
        for ((phi, &y), (w, e)) in phis.iter().zip(&ys).zip(&oracle) {
            let err = s.step(phi.clone(), y).unwrap();
            assert!((err - e).abs() <= 1e-9);
            assert!((s.alpha() - w).amax() <= 1e-9);
        }
    }

    #[test]
    fn mrls_zero_error_keeps_weights() {
        let mut s = MrlsState::new(2, 0.9, 2, DEFAULT_P_DELTA).unwrap();
        let k = DVector::from_column_slice(&[0.3, 0.8]);
        s.step(k.clone(), 0.0).unwrap();
        s.step(k, 0.0).unwrap();
        assert_eq!(s.alpha(), &DVector::zeros(2));
    }

    #[test]
    fn mrls_p_stays_symmetric_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = MrlsState::new(3, 0.9, 2, DEFAULT_P_DELTA).unwrap();
        for _ in 0..200 {
            let k = random_vec(&mut rng, 3, 1.0);
            let y = k[1] + rng.random_range(-0.1..0.1);
            s.step(k, y).unwrap();
            assert!((s.p() - s.p().transpose()).amax() <= 1e-10);
            assert!(min_eigenvalue(s.p()) > 0.0);
        }
    }

    #[test]
    fn mrls_expand_and_refresh() {
        let mut s = MrlsState::new(1, 1.0, 3, DEFAULT_P_DELTA).unwrap();
        s.step(DVector::from_column_slice(&[1.0]), 1.0).unwrap();
        s.expand();
        assert_eq!(s.len(), 2);
        assert_eq!(s.p()[(1, 1)], 1.0 / DEFAULT_P_DELTA);
        assert!(s.refresh_kvecs(vec![DVector::from_column_slice(&[1.0, 0.5])]).is_ok());
        assert!(s.refresh_kvecs(vec![]).is_err());
        assert!(s.step(DVector::from_column_slice(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn mrls_and_krls_agree_on_fixed_dictionary() {
        // With P₀ = δ⁻¹I, RLS solves the ridge problem with λ = δ, which is
        // what KRLS solves on a frozen dictionary with projection rows.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = GaussianKernel::isotropic(1, 2.0, 1.0).unwrap();
        let centers: Vec<_> = [-1.0, -0.3, 0.4, 1.1].iter().map(|&c| DVector::from_column_slice(&[c])).collect();
        let dict = Dictionary::from_centers(k, centers, None).unwrap();
        let mut krls = KrlsState::with_dictionary(&dict, DEFAULT_P_DELTA).unwrap();
        let mut mrls = MrlsState::new(4, 1.0, 1, DEFAULT_P_DELTA).unwrap();
        for _ in 0..500 {
            let x = random_vec(&mut rng, 1, 1.5);
            let y = (2.0 * x[0]).sin() + 0.05 * rng.random_range(-1.0..1.0);
            let kvec = dict.kernel_vector(&x).unwrap();
            let a = dict.gram_inverse() * &kvec;
            krls.update(&dict, &a, y).unwrap();
            mrls.step(kvec, y).unwrap();
        }
        assert!((krls.alpha() - mrls.alpha()).amax() <= 1e-4);
    }

    fn grad_setup() -> (Dictionary, DVector<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = GaussianKernel::isotropic(3, 0.7, 1.0).unwrap();
        let centers: Vec<_> = (0..5).map(|_| random_vec(&mut rng, 3, 1.5)).collect();
        let dict = Dictionary::from_centers(k, centers, None).unwrap();
        (dict, random_vec(&mut rng, 3, 1.5), 0.8)
    }

    #[test]
    fn grad_zero_error_is_fixed_point() {
        let (dict, x, _) = grad_setup();
        let mut s = RecurrentGradState::new(0.1, 0.01, vec![0]).unwrap();
        s.alpha = DVector::from_column_slice(&[0.3, -0.2, 0.1, 0.5, 0.0]);
        let y = dict.kernel_vector(&x).unwrap().dot(s.alpha());
        let before = s.alpha().clone();
        s.step(&dict, &x, y).unwrap();
        assert_eq!(s.alpha(), &before);
    }

    #[test]
    fn grad_plain_lms_step() {
        let (dict, x, y) = grad_setup();
        let mut s = RecurrentGradState::new(0.05, 0.0, vec![]).unwrap();
        s.alpha = DVector::from_column_slice(&[0.3, -0.2, 0.1, 0.5, 0.0]);
        let kvec = dict.kernel_vector(&x).unwrap();
        let e = y - kvec.dot(s.alpha());
        let before = s.alpha().clone();
        s.step(&dict, &x, y).unwrap();
        let expect = &kvec * (2.0 * 0.05 * e);
        assert!((s.alpha() - before - expect).amax() < 1e-15);
    }

    fn central_diff(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(at.len(), |i, _| {
            let mut hi = at.clone();
            let mut lo = at.clone();
            hi[i] += h;
            lo[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
    }

    #[test]
    fn grad_matches_finite_differences_without_feedback() {
        let (dict, x, y) = grad_setup();
        let mut s = RecurrentGradState::new(0.05, 0.0, vec![]).unwrap();
        s.alpha = DVector::from_column_slice(&[0.3, -0.2, 0.1, 0.5, -0.4]);
        let kvec = dict.kernel_vector(&x).unwrap();
        let g = s.gradient(&dict, &x, y).unwrap();
        let fd = central_diff(|a| (y - kvec.dot(a)).powi(2), s.alpha(), 1e-6);
        assert!((&g - &fd).norm() <= 1e-6 * fd.norm());
    }

    #[test]
    fn grad_feedback_term_matches_depth_one_model() {
        // Model: the feedback component equals its observed value plus the
        // change of last step's prediction under a perturbed weight vector.
        let (dict, x, y) = grad_setup();
        let prev = DVector::from_column_slice(&[0.2, -0.4, 0.9]);
        let alpha0 = DVector::from_column_slice(&[0.3, -0.2, 0.1, 0.5, -0.4]);
        let mut s = RecurrentGradState::new(0.05, 1.0, vec![1]).unwrap();
        s.alpha = alpha0.clone();
        s.prev_input = Some(prev.clone());
        let prev_k = dict.kernel_vector(&prev).unwrap();
        let loss = |a: &DVector<f64>| {
            let mut xa = x.clone();
            xa[1] += prev_k.dot(&(a - &alpha0));
            (y - dict.kernel_vector(&xa).unwrap().dot(a)).powi(2)
        };
        let g = s.gradient(&dict, &x, y).unwrap();
        let fd = central_diff(loss, &alpha0, 1e-6);
        assert!((&g - &fd).norm() <= 1e-6 * fd.norm());
    }

    #[test]
    fn grad_small_steps_decrease_error() {
        let (dict, x, y) = grad_setup();
        for eta in [1e-4, 1e-3] {
            let mut s = RecurrentGradState::new(eta, 0.01, vec![0]).unwrap();
            s.alpha = DVector::from_column_slice(&[0.3, -0.2, 0.1, 0.5, -0.4]);
            s.prev_input = Some(DVector::from_column_slice(&[0.1, 0.1, 0.1]));
            let kvec = dict.kernel_vector(&x).unwrap();
            let before = (y - kvec.dot(s.alpha())).powi(2);
            s.step(&dict, &x, y).unwrap();
            let after = (y - kvec.dot(s.alpha())).powi(2);
            assert!(after < before);
        }
    }

    #[test]
    fn grad_bad_lag() {
        let (dict, x, y) = grad_setup();
        let mut s = RecurrentGradState::new(0.1, 0.01, vec![7]).unwrap();
        s.alpha = DVector::zeros(5);
        assert!(s.gradient(&dict, &x, y).is_err());
        assert!(RecurrentGradState::new(0.0, 0.0, vec![]).is_err());
    }

    #[test]
    fn linear_rls_constant_stream() {
        let mut s = LinearRlsState::new(1, 0.99, DEFAULT_P_DELTA).unwrap();
        let x = DVector::from_column_slice(&[1.0]);
        for _ in 0..1000 {
            s.step(&x, 4.2).unwrap();
        }
        assert!((s.theta()[0] - 4.2).abs() < 1e-6);
    }

    #[test]
    fn linear_rls_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = LinearRlsState::new(3, 1.0, DEFAULT_P_DELTA).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..40 {
            let x = random_vec(&mut rng, 3, 1.0);
            let y = 1.5 * x[0] - x[2] + rng.random_range(-0.2..0.2);
            s.step(&x, y).unwrap();
            xs.push(x);
            ys.push(y);
        }
        // Prior δ‖θ‖² from P₀ = δ⁻¹I, solved directly by LU.
        let a = DMatrix::from_fn(40, 3, |r, c| xs[r][c]);
        let normal = a.transpose() * &a + DMatrix::identity(3, 3) * DEFAULT_P_DELTA;
        let theta = normal.lu().solve(&(a.transpose() * DVector::from_vec(ys))).unwrap();
        assert!((s.theta() - theta).amax() <= 1e-8);
    }

    #[test]
    fn linear_rls_zero_input() {
        let mut s = LinearRlsState::new(2, 0.8, DEFAULT_P_DELTA).unwrap();
        s.step(&DVector::from_column_slice(&[1.0, 2.0]), 1.0).unwrap();
        let theta = s.theta().clone();
        let p = s.p().clone();
        s.step(&DVector::zeros(2), 5.0).unwrap();
        assert_eq!(s.theta(), &theta);
        assert!((s.p() - p / 0.8).amax() < 1e-12);
    }

    #[test]
    fn batch_ls_cases() {
        let y = DVector::from_column_slice(&[1.0, -2.0, 3.0]);
        let w = batch_ls(&DMatrix::identity(3, 3), &y, 0.5).unwrap();
        assert!((w - &y / 1.5).amax() < 1e-15);

        let a = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        let yo = DVector::from_column_slice(&[1.0, -1.0, 0.0]);
        assert!(batch_ls(&a, &yo, 0.0).unwrap().amax() < 1e-15);

        let rank1 = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            batch_ls(&rank1, &DVector::from_column_slice(&[1.0, 0.0]), 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn batch_ls_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = random_vec(&mut rng, 10, 1.0);
        for lambda in [0.0, 0.3] {
            let w = batch_ls(&a, &y, lambda).unwrap();
            let grad = a.transpose() * (&a * &w - &y) + &w * lambda;
            assert!(grad.norm() <= 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn krls_unregularized_matches_batch(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = GaussianKernel::isotropic(2, 1.5, 1.0).unwrap();
                let mut run = Run::new(k, 0.0);
                for _ in 0..50 {
                    let x = random_vec(&mut rng, 2, 2.0);
                    let y = x[0] * x[1] + rng.random_range(-0.1..0.1);
                    run.push(&x, y, 0.05);
                    prop_assert!((run.state.alpha() - run.oracle()).amax() <= 1e-7);
                }
            }

            #[test]
            fn p_matrices_stay_symmetric_pd(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut mrls = MrlsState::new(3, 0.95, 3, DEFAULT_P_DELTA).unwrap();
                let mut lin = LinearRlsState::new(3, 0.98, DEFAULT_P_DELTA).unwrap();
                for _ in 0..1000 {
                    let k = random_vec(&mut rng, 3, 1.0);
                    let y = k[0] - k[1] + rng.random_range(-0.1..0.1);
                    mrls.step(k.clone(), y).unwrap();
                    lin.step(&k, y).unwrap();
                }
                for p in [mrls.p(), lin.p()] {
                    prop_assert!((p - p.transpose()).amax() <= 1e-10);
                    prop_assert!(min_eigenvalue(p) > 0.0);
                }
            }
        }
    }
}
