//! Online kernel dictionaries and the sparsification criteria that grow them.

use nalgebra::{DMatrix, DVector};

use crate::kernel::GaussianKernel;
use crate::linalg::{min_eigenvalue, spd_inverse_or_pinv, symmetrize};
use crate::{Error, Result};

/// Smallest Schur pivot accepted when admitting a node.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Ordered kernel dictionary with its Gram matrix and inverse.
///
/// All nodes share one [`GaussianKernel`], so the Gram matrix has a unit
/// diagonal.
#[derive(Clone, Debug)]
pub struct Dictionary {
    kernel: GaussianKernel,
    centers: Vec<DVector<f64>>,
    gram: DMatrix<f64>,
    gram_inverse: DMatrix<f64>,
    max_size: Option<usize>,
}

/// Outcome of the approximate-linear-dependency test for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AldResult {
    /// Squared feature-space distance from `φ(x)` to the span of the dictionary.
    pub delta1: f64,
    /// Projection coefficients `K̃⁻¹ k̃(x)`.
    pub alpha: DVector<f64>,
    /// The kernel vector `k̃(x)` the coefficients were computed from.
    pub kvec: DVector<f64>,
}

impl AldResult {
    /// The result for an empty dictionary: nothing to project onto.
    pub fn empty() -> Self {
        AldResult {
            delta1: 1.0,
            alpha: DVector::zeros(0),
            kvec: DVector::zeros(0),
        }
    }
}

impl Dictionary {
    pub fn new(kernel: GaussianKernel, max_size: Option<usize>) -> Self {
        Dictionary {
            kernel,
            centers: Vec::new(),
            gram: DMatrix::zeros(0, 0),
            gram_inverse: DMatrix::zeros(0, 0),
            max_size,
        }
    }

    /// Builds a dictionary directly from a set of centers.
    pub fn from_centers(
        kernel: GaussianKernel,
        centers: Vec<DVector<f64>>,
        max_size: Option<usize>,
    ) -> Result<Self> {
        if let Some(cap) = max_size {
            if centers.len() > cap {
                return Err(Error::usage(format!(
                    "{} centers exceed the dictionary cap {cap}",
                    centers.len()
                )));
            }
        }
        if centers.iter().any(|c| c.len() != kernel.dim()) {
            return Err(Error::usage("center dimension does not match the kernel"));
        }
        let mut dict = Dictionary {
            kernel,
            centers,
            gram: DMatrix::zeros(0, 0),
            gram_inverse: DMatrix::zeros(0, 0),
            max_size,
        };
        dict.refresh()?;
        Ok(dict)
    }

    /// Rebuilds Gram and inverse from the centers.
    fn refresh(&mut self) -> Result<()> {
        self.gram = self.rebuild_gram();
        if self.centers.is_empty() {
            self.gram_inverse = DMatrix::zeros(0, 0);
            return Ok(());
        }
        let (inv, fallback) = spd_inverse_or_pinv(&self.gram);
        if fallback {
            return Err(Error::numeric("dictionary Gram matrix is singular"));
        }
        self.gram_inverse = inv;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.max_size.is_some_and(|cap| self.centers.len() >= cap)
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    pub fn max_size(&self) -> Option<usize> {
        self.max_size
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    /// Swaps in a new kernel shape and rebuilds the cached matrices.
    pub fn set_kernel(&mut self, kernel: GaussianKernel) -> Result<()> {
        if kernel.dim() != self.kernel.dim() {
            return Err(Error::usage("kernel dimension change"));
        }
        self.kernel = kernel;
        self.refresh()
    }

    /// Gram matrix recomputed from scratch.
    pub fn rebuild_gram(&self) -> DMatrix<f64> {
        let m = self.centers.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            g[(i, i)] = 1.0;
            for j in (i + 1)..m {
                let v = self.kernel.eval_unchecked(&self.centers[i], &self.centers[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.kernel.dim() {
            return Err(Error::usage(format!(
                "input has dimension {}, dictionary expects {}",
                x.len(),
                self.kernel.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite input"));
        }
        Ok(())
    }

    /// `k̃(x)`: kernel evaluations against every center.
    pub fn kernel_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.kvec_unchecked(x))
    }

    pub(crate) fn kvec_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.centers.len(),
            self.centers.iter().map(|c| self.kernel.eval_unchecked(x, c)),
        )
    }

    /// Kernel expansion `Σ_i w_i k(c_i, x)`.
    pub fn predict(&self, weights: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        if weights.len() != self.len() {
            return Err(Error::usage(format!(
                "{} weights for {} nodes",
                weights.len(),
                self.len()
            )));
        }
        Ok(self.kernel_vector(x)?.dot(weights))
    }

    /// Approximate linear dependency of `φ(x)` on the dictionary.
    pub fn ald_test(&self, x: &DVector<f64>) -> Result<AldResult> {
        if self.is_empty() {
            return Err(Error::usage("ALD test on an empty dictionary"));
        }
        let kvec = self.kernel_vector(x)?;
        let alpha = &self.gram_inverse * &kvec;
        let delta1 = 1.0 - kvec.dot(&alpha);
        Ok(AldResult { delta1, alpha, kvec })
    }

    /// Appends `x` as a node and extends the inverse Gram by its Schur
    /// complement. `ald` must have been computed against the current state.
    pub fn ald_admit(&mut self, x: &DVector<f64>, ald: &AldResult) -> Result<()> {
        self.check_input(x)?;
        let m = self.len();
        if ald.alpha.len() != m || ald.kvec.len() != m {
            return Err(Error::usage("ALD result does not match the dictionary size"));
        }
        if self.is_full() {
            return Err(Error::usage("dictionary is at its size cap"));
        }
        if m == 0 {
            self.centers.push(x.clone());
            self.gram = DMatrix::from_element(1, 1, 1.0);
            self.gram_inverse = DMatrix::from_element(1, 1, 1.0);
            return Ok(());
        }
        let delta = ald.delta1;
        if !(delta > PIVOT_FLOOR) {
            return Err(Error::numeric(format!(
                "ALD pivot {delta:e} too small: input is numerically dependent"
            )));
        }
        let mut gram = self.gram.clone().resize(m + 1, m + 1, 0.0);
        for i in 0..m {
            gram[(i, m)] = ald.kvec[i];
            gram[(m, i)] = ald.kvec[i];
        }
        gram[(m, m)] = 1.0;

        let a = &ald.alpha;
        let mut inv = DMatrix::zeros(m + 1, m + 1);
        for i in 0..m {
            for j in 0..m {
                inv[(i, j)] = self.gram_inverse[(i, j)] + a[i] * a[j] / delta;
            }
            inv[(i, m)] = -a[i] / delta;
            inv[(m, i)] = -a[i] / delta;
        }
        inv[(m, m)] = 1.0 / delta;

        self.centers.push(x.clone());
        self.gram = gram;
        self.gram_inverse = symmetrize(&inv);
        Ok(())
    }

    /// Nearest center in Euclidean distance: `(index, squared distance)`.
    /// Ties go to the lowest index.
    pub fn distance_test(&self, x: &DVector<f64>) -> Result<(usize, f64)> {
        if self.is_empty() {
            return Err(Error::usage("distance test on an empty dictionary"));
        }
        self.check_input(x)?;
        let mut best = (0usize, f64::INFINITY);
        for (j, c) in self.centers.iter().enumerate() {
            let d = (x - c).norm_squared();
            if d < best.1 {
                best = (j, d);
            }
        }
        Ok(best)
    }

    /// Replaces the node with the smallest `|w_i|` (lowest index on ties)
    /// by a node at `x_new` and rebuilds the cached matrices. The caller
    /// resets its weight slot.
    pub fn replace_node(&mut self, weights: &DVector<f64>, x_new: &DVector<f64>) -> Result<usize> {
        self.check_input(x_new)?;
        if self.is_empty() {
            return Err(Error::usage("cannot replace a node in an empty dictionary"));
        }
        if weights.len() != self.len() {
            return Err(Error::usage("weight vector does not match the dictionary"));
        }
        let mut idx = 0;
        for i in 1..weights.len() {
            if weights[i].abs() < weights[idx].abs() {
                idx = i;
            }
        }
        let old = std::mem::replace(&mut self.centers[idx], x_new.clone());
        let m = self.len();
        for j in 0..m {
            let v = if j == idx {
                1.0
            } else {
                self.kernel.eval_unchecked(&self.centers[idx], &self.centers[j])
            };
            self.gram[(idx, j)] = v;
            self.gram[(j, idx)] = v;
        }
        let (inv, fallback) = spd_inverse_or_pinv(&self.gram);
        if fallback {
            self.centers[idx] = old;
            self.refresh()?;
            return Err(Error::numeric("replacement would make the Gram matrix singular"));
        }
        self.gram_inverse = inv;
        Ok(idx)
    }
}

/// Loss-change significance `½ Δαᵀ H Δα`.
pub fn loss_change_test(delta_alpha: &DVector<f64>, hessian: &DMatrix<f64>) -> Result<f64> {
    let n = delta_alpha.len();
    if hessian.nrows() != n || hessian.ncols() != n {
        return Err(Error::usage(format!(
            "hessian {}x{} for a change of length {n}",
            hessian.nrows(),
            hessian.ncols()
        )));
    }
    if n > 0 && min_eigenvalue(hessian) < -1e-8 {
        return Err(Error::numeric("loss-change hessian is not positive semidefinite"));
    }
    Ok(0.5 * delta_alpha.dot(&(hessian * delta_alpha)))
}

/// Stopping rule for orthogonal forward selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OfsBudget {
    pub max_terms: usize,
    /// Stop once the best remaining error-reduction ratio drops below this.
    pub min_err_ratio: f64,
}

impl OfsBudget {
    pub fn terms(max_terms: usize) -> Self {
        OfsBudget {
            max_terms,
            min_err_ratio: 0.0,
        }
    }
}

/// Result of orthogonal forward selection over a batch of candidates.
#[derive(Clone, Debug)]
pub struct OfsSelection {
    /// Candidate indices in pick order.
    pub selected_indices: Vec<usize>,
    pub err_ratios: Vec<f64>,
    /// Orthogonalized regressors `w_j`, one per pick.
    pub orthogonal_basis: Vec<DVector<f64>>,
    /// Orthogonal-space coefficients `g_j = w_jᵀy / w_jᵀw_j`.
    pub g: DVector<f64>,
    /// Unit upper-triangular `A` with `K_sel = W A`.
    pub a_upper: DMatrix<f64>,
}

impl OfsSelection {
    /// Kernel weights `α` for the selected columns, solving `A α = g`.
    pub fn weights(&self) -> DVector<f64> {
        let k = self.g.len();
        let mut alpha = DVector::zeros(k);
        for i in (0..k).rev() {
            let mut acc = self.g[i];
            for j in (i + 1)..k {
                acc -= self.a_upper[(i, j)] * alpha[j];
            }
            alpha[i] = acc;
        }
        alpha
    }

    pub fn centers(&self, candidates: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.selected_indices.iter().map(|&i| candidates[i].clone()).collect()
    }
}

/// Greedy forward selection of kernel regressors by error-reduction
/// ratio, using modified Gram–Schmidt on the full regression matrix
/// `K_ij = k(x_i, x_j)`.
pub fn ofs_select(
    candidates: &[DVector<f64>],
    y: &[f64],
    kernel: &GaussianKernel,
    budget: OfsBudget,
) -> Result<OfsSelection> {
    let n = candidates.len();
    if n == 0 || y.len() != n {
        return Err(Error::usage(format!(
            "OFS needs matching non-empty candidates and outputs ({n} vs {})",
            y.len()
        )));
    }
    if candidates.iter().any(|c| c.len() != kernel.dim()) {
        return Err(Error::usage("candidate dimension does not match the kernel"));
    }
    let yv = DVector::from_column_slice(y);
    let yty = yv.norm_squared();
    if !(yty > 0.0) {
        return Err(Error::usage("OFS needs a non-zero output vector"));
    }

    // Column j of the regression matrix, progressively orthogonalized.
    let mut columns: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            DVector::from_iterator(
                n,
                candidates.iter().map(|xi| kernel.eval_unchecked(xi, &candidates[j])),
            )
        })
        .collect();
    // MGS coefficients of each candidate against each pick so far.
    let mut coeffs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut active = vec![true; n];

    let mut selected = Vec::new();
    let mut ratios = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut g = Vec::new();
    let limit = budget.max_terms.min(n);

    while selected.len() < limit {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !active[j] {
                continue;
            }
            let wtw = columns[j].norm_squared();
            if wtw < 1e-12 {
                active[j] = false;
                continue;
            }
            let wty = columns[j].dot(&yv);
            let err = wty * wty / (wtw * yty);
            if best.is_none_or(|(_, b)| err > b) {
                best = Some((j, err));
            }
        }
        let Some((pick, err)) = best else { break };
        if err < budget.min_err_ratio {
            break;
        }
        active[pick] = false;
        let w = columns[pick].clone();
        let wtw = w.norm_squared();
        g.push(w.dot(&yv) / wtw);
        selected.push(pick);
        ratios.push(err);
        for j in 0..n {
            if active[j] {
                let c = w.dot(&columns[j]) / wtw;
                columns[j].axpy(-c, &w, 1.0);
                coeffs[j].push(c);
            }
        }
        basis.push(w);
    }

    let k = selected.len();
    let mut a_upper = DMatrix::identity(k, k);
    for (col, &j) in selected.iter().enumerate() {
        for row in 0..col {
            a_upper[(row, col)] = coeffs[j][row];
        }
    }
    Ok(OfsSelection {
        selected_indices: selected,
        err_ratios: ratios,
        orthogonal_basis: basis,
        g: DVector::from_vec(g),
        a_upper,
    })
}
