//! Gaussian kernels with a full symmetric precision matrix.
//!
//! A kernel evaluates `exp(-(x - c)ᵀ P (x - c) / h0)` where `P` is the
//! precision (inverse kernel covariance) and `h0` a magnitude factor that
//! rescales the quadratic form.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{from_eigen, is_exactly_symmetric, sym_eigen, symmetrize};
use crate::{Error, Result};

pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-12;

/// Symmetric positive-definite precision matrix.
///
/// Construction checks exact element-wise symmetry and that every
/// eigenvalue is at least the eigen floor.
#[derive(Clone, Debug, PartialEq)]
pub struct Precision(DMatrix<f64>);

impl Precision {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_floor(matrix, DEFAULT_EIGEN_FLOOR)
    }

    pub fn with_floor(matrix: DMatrix<f64>, eigen_floor: f64) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::usage(format!(
                "precision must be a non-empty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("precision has non-finite entries"));
        }
        if !is_exactly_symmetric(&matrix) {
            return Err(Error::usage("precision must be exactly symmetric"));
        }
        let (values, _) = sym_eigen(&matrix);
        let min = values[values.len() - 1];
        if min < eigen_floor {
            return Err(Error::numeric(format!(
                "precision has eigenvalue {min:e} below floor {eigen_floor:e}"
            )));
        }
        Ok(Precision(matrix))
    }

    /// `scale · I`.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * scale)
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(entries)))
    }

    /// Symmetrizes `matrix` and clamps its spectrum from below at
    /// `eigen_floor`. The eigendecomposition is only taken when the
    /// symmetrized matrix actually violates the floor, so a valid input
    /// passes through unchanged.
    pub fn project(matrix: &DMatrix<f64>, eigen_floor: f64) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("precision update produced non-finite entries"));
        }
        let sym = symmetrize(matrix);
        let (values, vectors) = sym_eigen(&sym);
        if values[values.len() - 1] >= eigen_floor {
            return Ok(Precision(sym));
        }
        // Reconstruction error is O(eps·‖P‖), so lift the floor by that much.
        let top = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let lifted = eigen_floor + 64.0 * f64::EPSILON * top * values.len() as f64;
        let clamped = values.map(|v| v.max(lifted));
        Ok(Precision(from_eigen(&clamped, &vectors)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `(1 - c0)·P ± p pᵀ`, then symmetrized and eigen-floored.
    pub fn rank_one_update(&self, p_sigma: &DVector<f64>, c0: f64, sign: UpdateSign) -> Result<Self> {
        self.rank_one_update_with_floor(p_sigma, c0, sign, DEFAULT_EIGEN_FLOOR)
    }

    pub fn rank_one_update_with_floor(
        &self,
        p_sigma: &DVector<f64>,
        c0: f64,
        sign: UpdateSign,
        eigen_floor: f64,
    ) -> Result<Self> {
        let n = self.dim();
        if p_sigma.len() != n {
            return Err(Error::usage(format!(
                "p_sigma has dimension {}, precision is {n}x{n}",
                p_sigma.len()
            )));
        }
        if !(c0 > 0.0 && c0 < 1.0) {
            return Err(Error::usage(format!("learning rate c0 must lie in (0,1), got {c0}")));
        }
        let s = sign.factor();
        let mut raw = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                raw[(i, j)] = (1.0 - c0) * self.0[(i, j)] + s * p_sigma[i] * p_sigma[j];
            }
        }
        Self::project(&raw, eigen_floor)
    }
}

/// Sign of the rank-one term in the precision update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateSign {
    #[default]
    Plus,
    Minus,
}

impl UpdateSign {
    pub fn factor(self) -> f64 {
        match self {
            UpdateSign::Plus => 1.0,
            UpdateSign::Minus => -1.0,
        }
    }
}

/// Default learning rate `2 / p_x²`, capped at 0.5 so the one-dimensional
/// case stays inside (0, 1).
pub fn default_learning_rate(dim: usize) -> f64 {
    let d = dim.max(1) as f64;
    (2.0 / (d * d)).min(0.5)
}

/// A Gaussian kernel shape shared by the nodes of one series group.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    precision: Precision,
    h0: f64,
}

impl GaussianKernel {
    pub fn new(precision: Precision, h0: f64) -> Result<Self> {
        if !(h0 > 0.0 && h0.is_finite()) {
            return Err(Error::usage(format!("h0 must be positive and finite, got {h0}")));
        }
        Ok(GaussianKernel { precision, h0 })
    }

    pub fn isotropic(dim: usize, scale: f64, h0: f64) -> Result<Self> {
        Self::new(Precision::isotropic(dim, scale)?, h0)
    }

    pub fn precision(&self) -> &Precision {
        &self.precision
    }

    pub fn h0(&self) -> f64 {
        self.h0
    }

    pub fn dim(&self) -> usize {
        self.precision.dim()
    }

    pub fn with_precision(&self, precision: Precision) -> Result<Self> {
        if precision.dim() != self.dim() {
            return Err(Error::usage("replacement precision changes the input dimension"));
        }
        Ok(GaussianKernel { precision, h0: self.h0 })
    }

    fn check(&self, x: &DVector<f64>, center: &DVector<f64>) -> Result<()> {
        let n = self.dim();
        if x.len() != n || center.len() != n {
            return Err(Error::usage(format!(
                "kernel of dimension {n} evaluated with input {} and center {}",
                x.len(),
                center.len()
            )));
        }
        if x.iter().chain(center.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite kernel input"));
        }
        Ok(())
    }

    /// `(x - c)ᵀ P (x - c)`.
    pub fn quadratic_form(&self, x: &DVector<f64>, center: &DVector<f64>) -> Result<f64> {
        self.check(x, center)?;
        Ok(self.quad_unchecked(x, center))
    }

    pub fn eval(&self, x: &DVector<f64>, center: &DVector<f64>) -> Result<f64> {
        self.check(x, center)?;
        Ok(self.eval_unchecked(x, center))
    }

    pub(crate) fn quad_unchecked(&self, x: &DVector<f64>, center: &DVector<f64>) -> f64 {
        let p = self.precision.matrix();
        let n = x.len();
        let mut acc = 0.0;
        for i in 0..n {
            let di = x[i] - center[i];
            let mut row = 0.0;
            for j in 0..n {
                row += p[(i, j)] * (x[j] - center[j]);
            }
            acc += di * row;
        }
        // A PD form is non-negative; round-off can push it a hair below zero.
        acc.max(0.0)
    }

    pub(crate) fn eval_unchecked(&self, x: &DVector<f64>, center: &DVector<f64>) -> f64 {
        (-self.quad_unchecked(x, center) / self.h0).exp()
    }

    /// Gradient of `k(x, c)` with respect to `x`: `-(2/h0) k P (x - c)`.
    pub(crate) fn grad_x(&self, x: &DVector<f64>, center: &DVector<f64>) -> DVector<f64> {
        let k = self.eval_unchecked(x, center);
        let d = x - center;
        self.precision.matrix() * d * (-2.0 * k / self.h0)
    }
}

/// One Gaussian regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelNode {
    pub center: DVector<f64>,
    pub kernel: GaussianKernel,
}

impl KernelNode {
    pub fn new(center: DVector<f64>, kernel: GaussianKernel) -> Result<Self> {
        if center.len() != kernel.dim() {
            return Err(Error::usage("center dimension does not match the kernel"));
        }
        Ok(KernelNode { center, kernel })
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        self.kernel.eval(x, &self.center)
    }

    pub fn quadratic_form(&self, x: &DVector<f64>) -> Result<f64> {
        self.kernel.quadratic_form(x, &self.center)
    }

    pub fn rank_one_update(&self, p_sigma: &DVector<f64>, c0: f64, sign: UpdateSign) -> Result<Self> {
        let precision = self.kernel.precision.rank_one_update(p_sigma, c0, sign)?;
        Ok(KernelNode {
            center: self.center.clone(),
            kernel: self.kernel.with_precision(precision)?,
        })
    }
}

/// Eigen-geometry of a kernel: the covariance `Σ = P⁻¹` has eigenpairs
/// `(λ_j, d_j)` and `U = [d_j / √λ_j]` satisfies `U Uᵀ = P`, so the
/// quadratic form equals `‖Uᵀ(x - c)‖²`.
#[derive(Clone, Debug)]
pub struct EigenTransform {
    /// Covariance eigenvalues `λ_j`, ascending (precision eigenvalues descending).
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub transform: DMatrix<f64>,
}

impl EigenTransform {
    pub fn from_precision(precision: &Precision) -> Self {
        let (mu, vectors) = sym_eigen(precision.matrix());
        let eigenvalues = mu.map(|v| 1.0 / v);
        let mut transform = vectors.clone();
        for (j, mut col) in transform.column_iter_mut().enumerate() {
            col *= 1.0 / eigenvalues[j].sqrt();
        }
        EigenTransform {
            eigenvalues,
            eigenvectors: vectors,
            transform,
        }
    }

    pub fn quadratic_form(&self, displacement: &DVector<f64>) -> f64 {
        (self.transform.transpose() * displacement).norm_squared()
    }

    /// `Σ_j d_j d_jᵀ / λ_j`.
    pub fn reconstruct_precision(&self) -> DMatrix<f64> {
        from_eigen(&self.eigenvalues.map(|v| 1.0 / v), &self.eigenvectors)
    }
}

/// Weighted empirical kernel covariance `h0 Σ_j w_j (x_j - c)(x_j - c)ᵀ`.
pub fn empirical_covariance(
    samples: &[DVector<f64>],
    weights: &[f64],
    center: &DVector<f64>,
    h0: f64,
) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::usage("empirical covariance needs at least one sample"));
    }
    if samples.len() != weights.len() {
        return Err(Error::usage(format!(
            "{} samples but {} weights",
            samples.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::usage("weights must be non-negative"));
    }
    let n = center.len();
    let mut acc = DMatrix::zeros(n, n);
    for (x, &w) in samples.iter().zip(weights) {
        if x.len() != n {
            return Err(Error::usage("sample dimension differs from center"));
        }
        let d = x - center;
        for i in 0..n {
            for j in i..n {
                acc[(i, j)] += w * d[i] * d[j];
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            acc[(j, i)] = acc[(i, j)];
        }
    }
    Ok(acc * h0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Precision {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        Precision::new(symmetrize(&m)).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn kernel_at_center_is_one() {
        let k = GaussianKernel::isotropic(3, 2.5, 0.7).unwrap();
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(k.eval(&c, &c).unwrap(), 1.0);
        assert_eq!(k.quadratic_form(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn isotropic_unit_distance() {
        let k = GaussianKernel::isotropic(2, 1.0, 1.0).unwrap();
        let c = DVector::from_vec(vec![0.0, 0.0]);
        let x = DVector::from_vec(vec![0.6, 0.8]);
        assert!((k.eval(&x, &c).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k.eval(&x, &c).unwrap() - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn diagonal_quadratic_form() {
        let k = GaussianKernel::new(Precision::diagonal(&[4.0, 1.0]).unwrap(), 1.0).unwrap();
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let x = DVector::from_vec(vec![2.0, 1.0]);
        assert_eq!(k.quadratic_form(&x, &c).unwrap(), 4.0);
    }

    #[test]
    fn eval_matches_eigen_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_spd(&mut rng, 3);
        let k = GaussianKernel::new(p.clone(), 1.7).unwrap();
        let et = EigenTransform::from_precision(&p);
        for _ in 0..50 {
            let c = random_vec(&mut rng, 3);
            let x = random_vec(&mut rng, 3);
            let oracle = (-et.quadratic_form(&(&x - &c)) / 1.7).exp();
            assert!((k.eval(&x, &c).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_form_direct_vs_eigen_1000_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..1000 {
            let n = [2, 3, 6][case % 3];
            let p = random_spd(&mut rng, n);
            let k = GaussianKernel::new(p.clone(), 1.0).unwrap();
            let et = EigenTransform::from_precision(&p);
            let c = random_vec(&mut rng, n);
            let x = random_vec(&mut rng, n);
            let direct = k.quadratic_form(&x, &c).unwrap();
            let eig = et.quadratic_form(&(&x - &c));
            assert!((direct - eig).abs() <= 1e-10 * (1.0 + direct.abs()), "case {case}");
        }
    }

    #[test]
    fn eigen_transform_is_orthonormal_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2, 3, 6] {
            let p = random_spd(&mut rng, n);
            let et = EigenTransform::from_precision(&p);
            let gram = et.eigenvectors.transpose() * &et.eigenvectors;
            for i in 0..n {
                assert!((gram[(i, i)] - 1.0).abs() < 1e-10);
                for j in 0..n {
                    if i != j {
                        assert!(gram[(i, j)].abs() <= 1e-10);
                    }
                }
            }
            let back = et.reconstruct_precision();
            let rel = (&back - p.matrix()).norm() / p.matrix().norm();
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn eval_rejects_bad_inputs() {
        let k = GaussianKernel::isotropic(2, 1.0, 1.0).unwrap();
        let c = DVector::from_vec(vec![0.0, 0.0]);
        assert!(matches!(k.eval(&DVector::from_vec(vec![1.0]), &c), Err(Error::Usage(_))));
        assert!(matches!(
            k.eval(&DVector::from_vec(vec![f64::NAN, 0.0]), &c),
            Err(Error::Numeric(_))
        ));
        assert!(GaussianKernel::isotropic(2, 1.0, 0.0).is_err());
    }

    #[test]
    fn precision_rejects_asymmetric_and_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(Precision::new(m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Precision::new(m).is_err());
    }

    #[test]
    fn empirical_covariance_cases() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let zero = empirical_covariance(std::slice::from_ref(&c), &[1.0], &c, 2.0).unwrap();
        assert_eq!(zero, DMatrix::zeros(3, 3));

        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let cov = empirical_covariance(&[&c + &e1, &c - &e1], &[0.5, 0.5], &c, 1.0).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect[(0, 0)] = 1.0;
        assert_eq!(cov, expect);

        assert!(matches!(
            empirical_covariance(&[], &[], &c, 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn empirical_covariance_matches_outer_product_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c = random_vec(&mut rng, 4);
        let samples: Vec<_> = (0..10).map(|_| random_vec(&mut rng, 4)).collect();
        let weights: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = empirical_covariance(&samples, &weights, &c, 0.3).unwrap();
        let mut oracle = DMatrix::zeros(4, 4);
        for (x, w) in samples.iter().zip(&weights) {
            let d = x - &c;
            oracle += &d * d.transpose() * (*w);
        }
        oracle *= 0.3;
        assert!((got - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn rank_one_zero_vector_scales_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_spd(&mut rng, 3);
        let out = p.rank_one_update(&DVector::zeros(3), 0.25, UpdateSign::Plus).unwrap();
        assert_eq!(out.matrix(), &(p.matrix() * 0.75));
    }

    #[test]
    fn rank_one_hand_case() {
        let p = Precision::isotropic(2, 1.0).unwrap();
        let out = p
            .rank_one_update(&DVector::from_vec(vec![1.0, 0.0]), 0.5, UpdateSign::Plus)
            .unwrap();
        assert_eq!(out.matrix(), &DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]));
    }

    #[test]
    fn rank_one_minus_is_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_spd(&mut rng, 3);
        let et = EigenTransform::from_precision(&p);
        // Push along the top precision eigenvector hard enough to go negative.
        let top = et.eigenvectors.column(0).into_owned();
        let mu = 1.0 / et.eigenvalues[0];
        let v = top * (2.0 * mu).sqrt();
        let c0 = default_learning_rate(3);
        let raw = p.matrix() * (1.0 - c0) - &v * v.transpose();
        assert!(min_eigenvalue(&symmetrize(&raw)) < 0.0, "oracle: raw update is indefinite");
        let out = p.rank_one_update(&v, c0, UpdateSign::Minus).unwrap();
        assert!(is_exactly_symmetric(out.matrix()));
        assert!(min_eigenvalue(out.matrix()) >= DEFAULT_EIGEN_FLOOR);
    }

    #[test]
    fn rank_one_rejects_bad_rate() {
        let p = Precision::isotropic(2, 1.0).unwrap();
        assert!(p.rank_one_update(&DVector::zeros(2), 1.0, UpdateSign::Plus).is_err());
        assert!(p.rank_one_update(&DVector::zeros(3), 0.5, UpdateSign::Plus).is_err());
    }

    #[test]
    fn default_rate() {
        assert_eq!(default_learning_rate(2), 0.5);
        assert!((default_learning_rate(3) - 2.0 / 9.0).abs() < 1e-16);
        assert_eq!(default_learning_rate(1), 0.5);
    }

    #[test]
    fn grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = GaussianKernel::new(random_spd(&mut rng, 3), 1.3).unwrap();
        let c = random_vec(&mut rng, 3);
        let x = random_vec(&mut rng, 3) * 0.3;
        let g = k.grad_x(&x, &c);
        for i in 0..3 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (k.eval(&xp, &c).unwrap() - k.eval(&xm, &c).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn kernel_in_unit_interval(seed in 0u64..10_000, scale in 0.01f64..5.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = GaussianKernel::new(random_spd(&mut rng, 3), scale).unwrap();
                let c = random_vec(&mut rng, 3);
                let x = random_vec(&mut rng, 3);
                let v = k.eval(&x, &c).unwrap();
                prop_assert!(v > 0.0 || k.quadratic_form(&x, &c).unwrap() / scale > 700.0);
                prop_assert!(v <= 1.0);
            }

            #[test]
            fn covariance_permutation_invariant(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = random_vec(&mut rng, 3);
                let samples: Vec<_> = (0..6).map(|_| random_vec(&mut rng, 3)).collect();
                let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
                let a = empirical_covariance(&samples, &weights, &c, 1.0).unwrap();
                let mut idx: Vec<usize> = (0..6).collect();
                idx.reverse();
                idx.swap(1, 4);
                let s2: Vec<_> = idx.iter().map(|&i| samples[i].clone()).collect();
                let w2: Vec<_> = idx.iter().map(|&i| weights[i]).collect();
                let b = empirical_covariance(&s2, &w2, &c, 1.0).unwrap();
                prop_assert!((a - b).abs().max() < 1e-12);
            }

            #[test]
            fn rank_one_output_valid(seed in 0u64..10_000, minus in any::<bool>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_spd(&mut rng, 3);
                let v = random_vec(&mut rng, 3);
                let sign = if minus { UpdateSign::Minus } else { UpdateSign::Plus };
                let out = p.rank_one_update(&v, default_learning_rate(3), sign).unwrap();
                prop_assert!(is_exactly_symmetric(out.matrix()));
                prop_assert!(min_eigenvalue(out.matrix()) >= DEFAULT_EIGEN_FLOOR);
            }
        }
    }
}
