//! Cholesky factorization and triangular solves.

use super::matrix::Matrix;
use crate::error::{shape_err, Error, Result};

/// Lower-triangular `L` with `L·Lᵀ = A`.
///
/// Only the lower triangle of `a` is read. A non-positive pivot yields
/// [`Error::NotPositiveDefinite`].
pub fn cholesky_decompose(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape_err("cholesky", format!("{:?} not square", a.shape())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L·y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves `Lᵀ·x = y` for lower-triangular `L`.
pub fn backward_substitute(l: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// `log det A` from its Cholesky factor.
pub fn log_det_from_cholesky(l: &Matrix) -> f64 {
    (0..l.rows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_factors_to_identity() {
        let l = cholesky_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn two_by_two_by_hand() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky_decompose(&a).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert!(l.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn negative_diagonal_is_rejected() {
        let mut a = Matrix::identity(3);
        a[(1, 1)] = -1.0;
        assert!(matches!(
            cholesky_decompose(&a),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn round_trip_random_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..9);
            let l = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => rng.gen_range(-1.0..1.0),
                std::cmp::Ordering::Equal => rng.gen_range(0.5..2.0),
                std::cmp::Ordering::Less => 0.0,
            });
            let a = l.matmul_transposed(&l).unwrap();
            let back = cholesky_decompose(&a).unwrap();
            let err = back.sub(&l).unwrap().frobenius_norm() / l.frobenius_norm();
            assert!(err <= 1e-8, "relative error {err}");
            let rebuilt = back.matmul_transposed(&back).unwrap();
            let rel = rebuilt.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel <= 1e-8);
        }
    }

    #[test]
    fn solves_invert_the_factor() {
        let a = Matrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ])
        .unwrap();
        let l = cholesky_decompose(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = backward_substitute(&l, &forward_substitute(&l, &b));
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[(i, j)] * x[j]).sum();
            assert!((ax - b[i]).abs() < 1e-12);
        }
    }
}
