//! 2x2 covariance algebra.
//!
//! Everything the bivariate model needs reduces to dense 2x2 blocks:
//! covariance construction from (variance, variance, correlation) triples,
//! Cholesky factors for sampling, and closed-form inverses for the
//! Woodbury identities used by the fitting and prediction code.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

pub type Mat2 = Matrix2<f64>;
pub type Vec2 = Vector2<f64>;

/// Builds the symmetric positive-definite matrix
/// `[[v1, rho*sqrt(v1*v2)], [rho*sqrt(v1*v2), v2]]`.
pub fn build_cov2(v1: f64, v2: f64, rho: f64) -> Result<Mat2> {
    if !(v1 > 0.0 && v1.is_finite()) || !(v2 > 0.0 && v2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "variances must be positive and finite, got ({v1}, {v2})"
        )));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "correlation must satisfy |rho| < 1, got {rho}"
        )));
    }
    let off = rho * (v1 * v2).sqrt();
    Ok(Mat2::new(v1, off, off, v2))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite 2x2 matrix.
///
/// Fails if the input is asymmetric or not positive definite within a relative
/// tolerance of 1e-12.
pub fn chol2(m: &Mat2) -> Result<Mat2> {
    let scale = m[(0, 0)].abs().max(m[(1, 1)].abs()).max(1.0);
    if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(format!(
            "asymmetric input to chol2: {m:?}"
        )));
    }
    if m[(0, 0)] <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "leading entry {} not positive",
            m[(0, 0)]
        )));
    }
    let l11 = m[(0, 0)].sqrt();
    let l21 = m[(1, 0)] / l11;
    let mut rem = m[(1, 1)] - l21 * l21;
    if rem <= 0.0 {
        if rem > -1e-12 * scale {
            rem = 0.0;
        } else {
            return Err(Error::NotPositiveDefinite(format!(
                "trailing pivot {rem} negative beyond tolerance"
            )));
        }
    }
    Ok(Mat2::new(l11, 0.0, l21, rem.sqrt()))
}

/// Closed-form inverse of a 2x2 matrix; fails on (near-)singular input.
pub fn inv2(m: &Mat2) -> Result<Mat2> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let scale = m.amax().max(1e-300);
    if det.abs() <= 1e-300 || det.abs() < 1e-15 * scale * scale * 1e-3 {
        return Err(Error::NotPositiveDefinite(format!(
            "singular 2x2 matrix, det = {det}"
        )));
    }
    Ok(Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

pub fn det2(m: &Mat2) -> f64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

/// Checks that a symmetric 2x2 matrix is positive definite.
pub fn is_spd2(m: &Mat2) -> bool {
    m[(0, 0)] > 0.0 && det2(m) > 0.0
}
