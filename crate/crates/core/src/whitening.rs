//! Batch whitening built on the Cholesky factor of the regularized,
//! unnormalized covariance of both views.
//!
//! With `Ẑ = [Z, Z']`, `μ = mean(Ẑ)` and `Σ = (Ẑ − μ)(Ẑ − μ)ᵀ`, the
//! regularized covariance is `Σ_ε = Σ + ε·I` with
//! `ε = max(epsilon_scale·trace(Σ)/D, 1e-10)`. Whitening uses `W = L⁻¹`
//! where `Σ_ε = L·Lᵀ`; since `L⁻ᵀL⁻¹ = Σ_ε⁻¹`, the whitened bilinear form
//! `(L⁻¹Z)ᵀ(L⁻¹Z')` equals `Zᵀ·Σ_ε⁻¹·Z'`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix::DenseMatrix;

/// Absolute lower bound on the ridge added to the covariance.
pub const EPSILON_FLOOR: f64 = 1e-10;

/// Batch mean, regularized covariance and its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningState {
    /// `D×1` mean of the concatenated views.
    pub mean: DenseMatrix,
    /// Raw unnormalized covariance `Σ`.
    pub raw_covariance: DenseMatrix,
    /// `Σ_ε = Σ + ε·I`.
    pub covariance: DenseMatrix,
    /// Lower-triangular `L` with `L·Lᵀ = Σ_ε`.
    pub cholesky: DenseMatrix,
    /// The `ε` actually added.
    pub epsilon: f64,
}

impl WhiteningState {
    pub fn dim(&self) -> usize {
        self.mean.rows()
    }

    /// Smallest diagonal entry of `L`.
    pub fn min_pivot(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.cholesky.get(i, i))
            .fold(f64::INFINITY, f64::min)
    }

    /// `X` with `Σ_ε·X = b`, via two triangular solves against `L`.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        linalg::cholesky_solve(&self.cholesky, b)
    }

    /// `(L⁻¹(Z − μ), L⁻¹(Z' − μ))`.
    pub fn whiten_views(
        &self,
        z: &DenseMatrix,
        z_prime: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        for m in [z, z_prime] {
            if m.rows() != self.dim() {
                return Err(Error::dim(
                    "whiten_views",
                    format!("state has D = {}, view has {} rows", self.dim(), m.rows()),
                ));
            }
        }
        Ok((
            linalg::solve_lower(&self.cholesky, &z.sub_column(&self.mean))?,
            linalg::solve_lower(&self.cholesky, &z_prime.sub_column(&self.mean))?,
        ))
    }
}

/// Batch statistics of the two views.
pub fn covariance_stats(
    z: &DenseMatrix,
    z_prime: &DenseMatrix,
    epsilon_scale: f64,
) -> Result<WhiteningState> {
    for m in [z, z_prime] {
        if !m.is_finite() {
            return Err(Error::Numeric("covariance_stats: non-finite feature".into()));
        }
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let zpv = tape.leaf(z_prime.clone());
    let nodes = covariance_on_tape(&mut tape, zv, zpv, epsilon_scale, false)?;
    Ok(nodes.state(&tape))
}

/// `X` with `Σ_ε·X = b`.
pub fn solve_spd(state: &WhiteningState, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.rows() != state.dim() {
        return Err(Error::dim(
            "solve_spd",
            format!("state has D = {}, rhs has {} rows", state.dim(), b.rows()),
        ));
    }
    state.solve(b)
}

/// Whitened views `L⁻¹(Z − μ)` and `L⁻¹(Z' − μ)`.
pub fn whiten_views(
    state: &WhiteningState,
    z: &DenseMatrix,
    z_prime: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    state.whiten_views(z, z_prime)
}

/// Tape nodes of the batch statistics.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceNodes {
    pub mean: Var,
    pub raw_covariance: Var,
    /// `Σ_ε`, behind a stop-gradient when requested.
    pub covariance: Var,
    pub centered_z: Var,
    pub centered_z_prime: Var,
    pub epsilon: f64,
}

impl CovarianceNodes {
    pub fn state(&self, tape: &Tape) -> WhiteningState {
        let covariance = tape.value(self.covariance).clone();
        // Σ_ε already factored successfully in covariance_on_tape
        let cholesky = linalg::cholesky_factor(&covariance).expect("factor checked on construction");
        WhiteningState {
            mean: tape.value(self.mean).clone(),
            raw_covariance: tape.value(self.raw_covariance).clone(),
            covariance,
            cholesky,
            epsilon: self.epsilon,
        }
    }
}

/// Records `μ`, `Z − μ`, `Z' − μ` and `Σ_ε` on the tape. Gradients flow
/// through `Σ_ε` back into both views unless `sigma_stop_grad` is set.
pub fn covariance_on_tape(
    tape: &mut Tape,
    z: Var,
    z_prime: Var,
    epsilon_scale: f64,
    sigma_stop_grad: bool,
) -> Result<CovarianceNodes> {
    let (zs, zps) = (tape.value(z).shape(), tape.value(z_prime).shape());
    if zs != zps {
        return Err(Error::dim(
            "covariance_stats",
            format!("views are {}x{} and {}x{}", zs.0, zs.1, zps.0, zps.1),
        ));
    }
    if zs.0 == 0 || zs.1 == 0 {
        return Err(Error::dim("covariance_stats", "empty views"));
    }
    if !(epsilon_scale >= 0.0) || !epsilon_scale.is_finite() {
        return Err(Error::Config(format!(
            "epsilon_scale must be finite and nonnegative, got {epsilon_scale}"
        )));
    }
    let n = zs.1;
    let both = tape.hconcat(z, z_prime)?;
    let mean = tape.row_mean(both);
    let centered = tape.sub_column(both, mean)?;
    let centered_t = tape.transpose(centered);
    let raw = tape.matmul(centered, centered_t)?;
    let (reg, epsilon) = tape.regularize_spd(raw, epsilon_scale, EPSILON_FLOOR)?;
    if let Err(source) = linalg::cholesky_factor(tape.value(reg)) {
        return Err(Error::Conditioning {
            trace: tape.value(raw).trace(),
            dim: zs.0,
            source: Box::new(source),
        });
    }
    let covariance = if sigma_stop_grad {
        tape.stop_gradient(reg)
    } else {
        reg
    };
    let centered_z = tape.col_range(centered, 0, n)?;
    let centered_z_prime = tape.col_range(centered, n, 2 * n)?;
    Ok(CovarianceNodes {
        mean,
        raw_covariance: raw,
        covariance,
        centered_z,
        centered_z_prime,
        epsilon,
    })
}

/// Whitened views on the tape: `L⁻¹(Z − μ)`, `L⁻¹(Z' − μ)`.
pub fn whiten_views_on_tape(tape: &mut Tape, nodes: &CovarianceNodes) -> Result<(Var, Var)> {
    let wz = tape.whiten_lower(nodes.covariance, nodes.centered_z)?;
    let wzp = tape.whiten_lower(nodes.covariance, nodes.centered_z_prime)?;
    Ok((wz, wzp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(c: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_columns(c).unwrap()
    }

    #[test]
    fn antipodal_pair() {
        let s = covariance_stats(&cols(&[&[1.0, 0.0]]), &cols(&[&[-1.0, 0.0]]), 0.0).unwrap();
        assert_eq!(s.mean.data(), &[0.0, 0.0]);
        assert_eq!(
            s.raw_covariance,
            DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]).unwrap()
        );
        assert_eq!(s.epsilon, 1e-10);
        assert_eq!(s.covariance.get(0, 0), 2.0 + 1e-10);
        assert_eq!(s.covariance.get(1, 1), 1e-10);
        assert_eq!(s.covariance.get(0, 1), 0.0);
    }

    #[test]
    fn isotropic_four_points() {
        let z = cols(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let zp = cols(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let s = covariance_stats(&z, &zp, 0.0).unwrap();
        assert_eq!(
            s.raw_covariance,
            DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap()
        );
        let r2 = 2f64.sqrt();
        assert!((s.cholesky.get(0, 0) - r2).abs() < 1e-10);
        assert!((s.cholesky.get(1, 1) - r2).abs() < 1e-10);
        assert_eq!(s.cholesky.get(1, 0), 0.0);

        let (wz, wzp) = s.whiten_views(&z, &zp).unwrap();
        let h = 1.0 / r2;
        let expect_z = cols(&[&[h, 0.0], &[-h, 0.0]]);
        let expect_zp = cols(&[&[0.0, h], &[0.0, -h]]);
        assert!(wz.sub(&expect_z).unwrap().max_abs() < 1e-10);
        assert!(wzp.sub(&expect_zp).unwrap().max_abs() < 1e-10);
        let all = wz.hconcat(&wzp).unwrap();
        let cov = all.matmul(&all.transpose()).unwrap();
        assert!(cov.sub(&DenseMatrix::identity(2)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn whitened_input_is_fixed_point() {
        // columns ±e1/√2, ±e2/√2: zero mean and Ẑ·Ẑᵀ = I
        let h = 1.0 / 2f64.sqrt();
        let z = cols(&[&[h, 0.0], &[0.0, h]]);
        let zp = cols(&[&[-h, 0.0], &[0.0, -h]]);
        let s = covariance_stats(&z, &zp, 0.0).unwrap();
        let (wz, wzp) = s.whiten_views(&z, &zp).unwrap();
        assert!(wz.sub(&z).unwrap().max_abs() < 1e-10);
        assert!(wzp.sub(&zp).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn solve_identity_and_diagonal() {
        // Σ_ε ≈ I: identity system
        let h = 1.0 / 2f64.sqrt();
        let z = cols(&[&[h, 0.0], &[0.0, h]]);
        let zp = cols(&[&[-h, 0.0], &[0.0, -h]]);
        let s = covariance_stats(&z, &zp, 0.0).unwrap();
        let b = DenseMatrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        assert!(solve_spd(&s, &b).unwrap().sub(&b).unwrap().max_abs() < 1e-9);

        // Σ = diag(2, 2)
        let z = cols(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let zp = cols(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let s = covariance_stats(&z, &zp, 0.0).unwrap();
        let x = solve_spd(&s, &cols(&[&[2.0, 4.0]])).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-9);
        assert!(matches!(
            solve_spd(&s, &DenseMatrix::zeros(3, 1)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mismatched_views_rejected() {
        let z = DenseMatrix::zeros(2, 3);
        let zp = DenseMatrix::zeros(2, 4);
        assert!(matches!(
            covariance_stats(&z, &zp, 0.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rank_deficient_without_ridge_is_conditioning_error() {
        // all columns identical: Σ = 0, ε = floor, still PD
        let z = DenseMatrix::filled(3, 4, 1.0);
        let s = covariance_stats(&z, &z, 0.0).unwrap();
        assert_eq!(s.epsilon, EPSILON_FLOOR);
        // huge magnitudes swamp the floor and break factorization
        let big = DenseMatrix::from_columns(&[&[1e12, 1e12], &[-1e12, -1e12]]).unwrap();
        match covariance_stats(&big, &big, 0.0) {
            Err(Error::Conditioning { dim, trace, .. }) => {
                assert_eq!(dim, 2);
                assert!(trace > 0.0);
            }
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }
}
