//! Small dense SPD linear algebra on top of nalgebra's Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SYMMETRY_TOL: f64 = 1e-10;

pub(crate) fn cholesky(a: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if !is_symmetric(a) {
        return Err(Error::NotPositiveDefinite);
    }
    a.clone().cholesky().ok_or(Error::NotPositiveDefinite)
}

pub fn is_symmetric(a: &Matrix) -> bool {
    let scale = a.amax().max(1.0);
    a.is_square()
        && (0..a.nrows())
            .all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= SYMMETRY_TOL * scale))
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    check_dim(a.nrows(), b.len())?;
    Ok(cholesky(a)?.solve(b))
}

/// Solves `A X = B` column by column.
pub fn spd_solve_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dim(a.nrows(), b.nrows())?;
    Ok(cholesky(a)?.solve(b))
}

pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    Ok(cholesky(a)?.inverse())
}

/// `ln det A` from the Cholesky pivots.
pub fn spd_log_det(a: &Matrix) -> Result<f64> {
    let l = cholesky(a)?.unpack();
    Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(a: &Matrix) -> Result<Matrix> {
    Ok(cholesky(a)?.unpack())
}

/// General (not necessarily symmetric) square solve, for the few places that
/// need one.
pub fn lu_solve_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dim(a.nrows(), b.nrows())?;
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Domain("singular matrix".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkit::RngStream;

    /// Random SPD matrix `Q diag(eig) Qᵀ` with eigenvalues in `[1, cond]`.
    pub(crate) fn random_spd(d: usize, cond: f64, rng: &mut RngStream) -> Matrix {
        let g = Matrix::from_fn(d, d, |_, _| rng.normal());
        let q = g.qr().q();
        let eig = Vector::from_fn(d, |i, _| {
            if d == 1 {
                1.0
            } else {
                cond.powf(i as f64 / (d - 1) as f64)
            }
        });
        let a = &q * Matrix::from_diagonal(&eig) * q.transpose();
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_and_scaled_identity() {
        let b = Vector::from_vec(vec![1.0, -2.0, 3.5]);
        let x = spd_solve(&Matrix::identity(3, 3), &b).unwrap();
        assert_eq!(x, b);
        let x = spd_solve(&(Matrix::identity(3, 3) * 2.0), &b).unwrap();
        assert!((x - &b / 2.0).amax() < 1e-15);
    }

    #[test]
    fn matches_dense_inverse_on_random_spd() {
        let mut rng = RngStream::new(11, 0);
        for d in [1, 2, 4, 8, 16] {
            let a = random_spd(d, 1e4, &mut rng);
            let b = Vector::from_fn(d, |_, _| rng.normal());
            let x = spd_solve(&a, &b).unwrap();
            let oracle = a.clone().try_inverse().unwrap() * &b;
            assert!((&x - &oracle).amax() <= 1e-9 * oracle.amax().max(1.0));
            let resid = (&a * &x - &b).norm() / b.norm();
            assert!(resid <= 1e-10, "residual {resid}");
        }
    }

    #[test]
    fn non_pd_is_rejected() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let b = Vector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(spd_solve(&a, &b), Err(Error::NotPositiveDefinite)));
        let asym = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(spd_solve(&asym, &b), Err(Error::NotPositiveDefinite)));
        assert!(matches!(
            spd_solve(&Matrix::identity(3, 3), &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        assert!((spd_log_det(&a).unwrap() - 6f64.ln()).abs() < 1e-14);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn solve_round_trip(seed in 0u64..u64::MAX, d in 1usize..12) {
            let mut rng = RngStream::new(seed, 0);
            let a = random_spd(d, 1e4, &mut rng);
            let b = Vector::from_fn(d, |_, _| rng.normal());
            let x = spd_solve(&a, &b).unwrap();
            proptest::prop_assert!((&a * &x - &b).amax() <= 1e-9 * b.amax());
        }
    }
}

#[cfg(test)]
pub(crate) use tests::random_spd;
