//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Returns `(m + mᵀ) / 2` with the two triangles written from the same
/// value, so the result is symmetric to the bit.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn is_exactly_symmetric(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    (0..n).all(|i| ((i + 1)..n).all(|j| m[(i, j)] == m[(j, i)]))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted in
/// descending order. Each eigenvector is sign-normalised so that its
/// largest-magnitude component is positive, which makes the output
/// deterministic for distinct eigenvalues.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let (values, _) = sym_eigen(m);
    values[values.len() - 1]
}

/// `V diag(values) Vᵀ`, symmetrized.
pub fn from_eigen(values: &DVector<f64>, vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let scaled = vectors * DMatrix::from_diagonal(values);
    symmetrize(&(scaled * vectors.transpose()))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix through its
/// eigendecomposition; eigenvalues below `rcond · max|λ|` are dropped.
pub fn sym_pinv(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(m);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let inv = values.map(|v| if v.abs() > rcond * scale && v != 0.0 { 1.0 / v } else { 0.0 });
    from_eigen(&inv, &vectors)
}

/// SPD inverse with a pseudo-inverse fallback. The flag reports whether
/// the fallback was taken.
pub fn spd_inverse_or_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    match spd_inverse(m) {
        Ok(inv) => (inv, false),
        Err(_) => (sym_pinv(m, 1e-12), true),
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}
