//! Thin helpers over nalgebra's dense decompositions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Symmetric eigendecomposition with eigenvalues ascending; eigenvectors are
/// the matching columns.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let eig = nalgebra::SymmetricEigen::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(&order);
    Ok((values, vectors))
}

/// Left singular vectors and singular values, sorted by decreasing singular value.
pub fn left_singular(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = nalgebra::SVD::try_new(m.clone(), true, false, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok((u.select_columns(&order), sv))
}

/// Flips `v` so its entry of largest magnitude is positive (lowest index wins ties).
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Largest squared singular value of `m`, from the smaller Gram matrix.
pub fn spectral_norm_sq(m: &DMatrix<f64>) -> Result<f64> {
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    largest_eigenvalue(&gram)
}

pub fn largest_eigenvalue(sym: &DMatrix<f64>) -> Result<f64> {
    let n = sym.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let (vals, _) = sym_eigen(sym)?;
    Ok(vals[n - 1].max(0.0))
}
