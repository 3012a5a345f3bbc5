//! Small dense helpers shared by the problem builder and the SQP layer.

use nalgebra::{DMatrix, SymmetricEigen};

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Matrix absolute value `(MᵀM)^½`, a PSD matrix with the singular values
/// of `M` as eigenvalues. Equals the elementwise absolute value for diagonal
/// `M`.
pub fn matrix_abs(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mtm = symmetrize(&(m.transpose() * m));
    let eig = SymmetricEigen::new(mtm);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&vals) * v.transpose()
}

/// Eigenvalue flip: every eigenvalue with magnitude at most `eps` becomes
/// `eps`, every other eigenvalue is replaced by its absolute value.
/// Returns `None` for non-finite input.
pub fn flip_regularize(m: &DMatrix<f64>, eps: f64) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::try_new(symmetrize(m), f64::EPSILON, 0)?;
    let vals = eig.eigenvalues.map(|l| if l.abs() <= eps { eps } else { l.abs() });
    let v = &eig.eigenvectors;
    Some(symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose())))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Leading principal minors of a square matrix.
pub fn leading_minors(m: &DMatrix<f64>) -> Vec<f64> {
    (1..=m.nrows()).map(|k| m.view((0, 0), (k, k)).into_owned().determinant()).collect()
}

/// Numerical rank from singular values relative to the largest one.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn abs_of_diagonal_is_elementwise() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[-10.0, 3.0]));
        let a = matrix_abs(&m);
        assert_relative_eq!(a, DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[10.0, 3.0])), epsilon = 1e-12);
    }

    #[test]
    fn flip_example() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[-2.0, 0.0, 3.0]));
        let f = flip_regularize(&m, 1e-4).unwrap();
        let mut d: Vec<f64> = SymmetricEigen::new(f).eigenvalues.iter().copied().collect();
        d.sort_by(f64::total_cmp);
        assert_relative_eq!(d[0], 1e-4, epsilon = 1e-12);
        assert_relative_eq!(d[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(d[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn minors_of_chain_skeleton() {
        let q = DMatrix::from_row_slice(
            4,
            4,
            &[20.0, -10.0, 0.0, 0.0, -10.0, 20.0, -10.0, 0.0, 0.0, -10.0, 20.0, -10.0, 0.0, 0.0, -10.0, 10.0],
        );
        let m = leading_minors(&q);
        for (got, want) in m.iter().zip([20.0, 300.0, 4000.0, 10000.0]) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
    }
}
