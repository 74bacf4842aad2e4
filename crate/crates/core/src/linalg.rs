//! Thin wrappers over faer for the dense complex kernels used throughout.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, MatRef, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = Mat<Complex64>;

/// Eigendecomposition `A = V diag(λ) V⁻¹` with right eigenvectors as the
/// columns of `V` and left eigenvectors read off the rows of `V⁻¹`.
pub struct Eigen {
    pub values: Vec<Complex64>,
    pub right: CMat,
    /// Row `i` of `V⁻¹`; `left_rows[i] · right[:, i] = 1`.
    pub left_rows: CMat,
}

pub fn eigen(a: MatRef<'_, Complex64>) -> Result<Eigen> {
    let evd = a.eigen().map_err(|e| Error::EigensolverFailure(format!("{e:?}")))?;
    let n = a.nrows();
    let values: Vec<Complex64> = (0..n).map(|i| evd.S()[i]).collect();
    let right = evd.U().to_owned();
    let left_rows = right.partial_piv_lu().inverse();
    Ok(Eigen { values, right, left_rows })
}

pub fn eigenvalues(a: MatRef<'_, Complex64>) -> Result<Vec<Complex64>> {
    a.eigenvalues().map_err(|e| Error::EigensolverFailure(format!("{e:?}")))
}

pub fn inverse(a: MatRef<'_, Complex64>) -> CMat {
    a.partial_piv_lu().inverse()
}

/// Determinant by partially pivoted elimination. An exactly zero pivot
/// column gives 0 rather than the NaN a blocked LU produces.
pub fn det(a: MatRef<'_, Complex64>) -> Complex64 {
    let n = a.nrows();
    let mut w = a.to_owned();
    let mut d = Complex64::new(1.0, 0.0);
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| w[(i, c)].norm().total_cmp(&w[(j, c)].norm())).unwrap_or(c);
        if w[(piv, c)].norm() == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        if piv != c {
            for j in 0..n {
                let tmp = w[(c, j)];
                w[(c, j)] = w[(piv, j)];
                w[(piv, j)] = tmp;
            }
            d = -d;
        }
        let p = w[(c, c)];
        d *= p;
        for i in c + 1..n {
            let f = w[(i, c)] / p;
            if f.norm() == 0.0 {
                continue;
            }
            for j in c..n {
                let v = w[(c, j)];
                w[(i, j)] -= f * v;
            }
        }
    }
    d
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: MatRef<'_, Complex64>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::EigensolverFailure(format!("{e:?}")))
}

pub fn singular_values(a: MatRef<'_, Complex64>) -> Result<Vec<f64>> {
    a.singular_values().map_err(|e| Error::EigensolverFailure(format!("{e:?}")))
}

/// Maximum of non-negative values, NaN if any value is NaN. Empty gives 0.
pub fn max_or_nan(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |a: f64, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

/// `Σ a_i conj(b_i)`, linear in the first argument.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn column(a: MatRef<'_, Complex64>, j: usize) -> Vec<Complex64> {
    (0..a.nrows()).map(|i| a[(i, j)]).collect()
}

/// Conjugated row, i.e. the column vector `w` with `wᴴ = a[i, :]`.
pub fn conj_row(a: MatRef<'_, Complex64>, i: usize) -> Vec<Complex64> {
    (0..a.ncols()).map(|j| a[(i, j)].conj()).collect()
}

/// Rotate `v` so that its largest-modulus entry is real and positive.
pub fn fix_phase(v: &mut [Complex64]) {
    let Some(pivot) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()).then(b.0.cmp(&a.0)))
        .map(|(_, x)| *x)
    else {
        return;
    };
    if pivot.norm() == 0.0 {
        return;
    }
    let phase = pivot.conj() / pivot.norm();
    v.iter_mut().for_each(|x| *x *= phase);
}
