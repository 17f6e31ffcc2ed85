//! Small dense linear-algebra kernels on `ndarray` matrices.
//!
//! Cholesky factorization and the SPD inverse are implemented here; the
//! symmetric eigendecomposition is delegated to `nalgebra`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::{Error, Result};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`Error::NumericalRank`] when a pivot is not positive relative to
/// the matrix scale.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("cholesky of non-square {}x{}", n, a.ncols())));
    }
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > scale * 1e-13) {
            return Err(Error::NumericalRank(format!(
                "pivot {j} is {diag:e} (matrix scale {scale:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let n = l.nrows();
    // invert the triangular factor column by column
    let mut linv = Array2::<f64>::zeros((n, n));
    for c in 0..n {
        linv[[c, c]] = 1.0 / l[[c, c]];
        for i in c + 1..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[[i, k]] * linv[[k, c]];
            }
            linv[[i, c]] = s / l[[i, i]];
        }
    }
    let mut inv = linv.t().dot(&linv);
    symmetrize(&mut inv);
    Ok(inv)
}

/// Replaces `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let values = Array1::from_iter(eig.eigenvalues.iter().copied());
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, j)]);
    (values, vectors)
}

pub fn trace(a: ArrayView2<'_, f64>) -> f64 {
    a.diag().sum()
}
