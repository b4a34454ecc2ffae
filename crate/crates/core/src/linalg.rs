//! Cholesky factorization and triangular solves on [`DenseMatrix`].
//!
//! These are the unrecorded kernels; the differentiable versions live on the
//! tape (`Tape::solve_spd`, `Tape::whiten_lower`) and in [`crate::whitening`].

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Symmetry tolerance, relative to `max(1, max |a_ij|)`.
const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular `L` with positive diagonal such that `L·Lᵀ = a`.
pub fn cholesky_factor(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim(
            "cholesky_factor",
            format!("{}x{} is not square", a.rows(), a.cols()),
        ));
    }
    let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return Err(Error::Contract(format!(
                    "cholesky_factor: input not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

fn check_rhs(l: &DenseMatrix, b: &DenseMatrix, op: &'static str) -> Result<()> {
    if b.rows() != l.rows() {
        return Err(Error::dim(
            op,
            format!("factor is {}x{}, rhs has {} rows", l.rows(), l.cols(), b.rows()),
        ));
    }
    Ok(())
}

/// Solves `L·X = B` by forward substitution.
pub fn solve_lower(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_rhs(l, b, "solve_lower")?;
    let (n, m) = b.shape();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// Solves `Lᵀ·X = B` by back substitution, reading `L` as lower-triangular.
pub fn solve_lower_transpose(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_rhs(l, b, "solve_lower_transpose")?;
    let (n, m) = b.shape();
    let mut x = b.clone();
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// Solves `(L·Lᵀ)·X = B` given the Cholesky factor.
pub fn cholesky_solve(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    solve_lower_transpose(l, &solve_lower(l, b)?)
}

/// `L⁻ᵀ·P·L⁻¹`.
pub(crate) fn congruence_inverse(l: &DenseMatrix, p: &DenseMatrix) -> Result<DenseMatrix> {
    let q = solve_lower_transpose(l, p)?;
    Ok(solve_lower_transpose(l, &q.transpose())?.transpose())
}

/// `½(M + Mᵀ)`.
pub(crate) fn symmetrize(m: &DenseMatrix) -> DenseMatrix {
    let t = m.transpose();
    m.zip_map(&t, |a, b| 0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.transpose()
            .matmul(&a)
            .unwrap()
            .add(&DenseMatrix::identity(n))
            .unwrap()
    }

    #[test]
    fn diagonal_factor() {
        let a = DenseMatrix::from_rows(&[&[4.0, 0.0], &[0.0, 9.0]]).unwrap();
        let l = cholesky_factor(&a).unwrap();
        assert_eq!(l, DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]).unwrap());
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        match cholesky_factor(&a) {
            Err(Error::NotPositiveDefinite { pivot, value }) => {
                assert_eq!(pivot, 1);
                assert!((value + 3.0).abs() < 1e-12);
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DenseMatrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_factor(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn random_spd_reconstructs() {
        for seed in 0..5 {
            let a = random_spd(6, seed);
            let l = cholesky_factor(&a).unwrap();
            for i in 0..6 {
                assert!(l.get(i, i) > 0.0);
                for j in (i + 1)..6 {
                    assert_eq!(l.get(i, j), 0.0);
                }
            }
            let err = l.matmul(&l.transpose()).unwrap().sub(&a).unwrap().max_abs();
            assert!(err <= 1e-12, "reconstruction error {err}");
        }
    }

    #[test]
    fn solves_have_small_residual() {
        let a = random_spd(5, 11);
        let l = cholesky_factor(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DenseMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let x = cholesky_solve(&l, &b).unwrap();
        let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(resid / b.frobenius_norm() <= 1e-12);

        let y = solve_lower(&l, &b).unwrap();
        assert!(l.matmul(&y).unwrap().sub(&b).unwrap().max_abs() < 1e-12);
        let z = solve_lower_transpose(&l, &b).unwrap();
        assert!(l.transpose().matmul(&z).unwrap().sub(&b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn rhs_row_mismatch_is_dimension_error() {
        let l = DenseMatrix::identity(3);
        let b = DenseMatrix::zeros(2, 1);
        assert!(matches!(solve_lower(&l, &b), Err(Error::Dimension { .. })));
    }
}
