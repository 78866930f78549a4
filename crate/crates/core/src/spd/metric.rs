//! The affine-invariant Riemannian metric: distance, exp/log maps, geodesics.

use super::{check_same_dim, sym_apply, sym_part, SpdMatrix, SpectralFn, TangentVector};
use crate::error::{Error, Result};

/// Affine-invariant distance `‖log(A^{-1/2} B A^{-1/2})‖_F`.
///
/// Invariant under congruence: `d(A, B) = d(W A W', W B W')` for any
/// invertible `W`.
pub fn airm_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    check_same_dim(a, b, "airm_distance")?;
    let w = a.invsqrt()?;
    let m = sym_part(&(w.matrix() * b.matrix() * w.matrix()));
    let eig = super::eig_sym(&m)?;
    let mut sq = 0.0;
    for &l in eig.eigenvalues().iter() {
        if l <= 0.0 {
            return Err(Error::SpectrumOutOfDomain {
                f: "airm_distance",
                eigenvalue: l,
            });
        }
        sq += l.ln().powi(2);
    }
    Ok(sq.sqrt())
}

/// Riemannian logarithm: the tangent vector at `base` pointing to `p`.
///
/// `log_map(B, P) = B^{1/2} log(B^{-1/2} P B^{-1/2}) B^{1/2}`.
pub fn log_map(base: &SpdMatrix, p: &SpdMatrix) -> Result<TangentVector> {
    check_same_dim(base, p, "log_map")?;
    let s = base.sqrt()?;
    let w = base.invsqrt()?;
    let whitened = sym_part(&(w.matrix() * p.matrix() * w.matrix()));
    let log = sym_apply(&whitened, SpectralFn::Log)?;
    let value = s.matrix() * log * s.matrix();
    Ok(TangentVector::from_trusted(base.clone(), value))
}

/// Riemannian exponential: follows the geodesic from `base` along `v` for
/// unit time. Inverse of [`log_map`].
pub fn exp_map(base: &SpdMatrix, v: &TangentVector) -> Result<SpdMatrix> {
    if base.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            op: "exp_map",
            expected: base.dim(),
            found: v.dim(),
        });
    }
    let s = base.sqrt()?;
    let w = base.invsqrt()?;
    let whitened = sym_part(&(w.matrix() * v.value() * w.matrix()));
    let exp = sym_apply(&whitened, SpectralFn::Exp)?;
    Ok(SpdMatrix::from_trusted(s.matrix() * exp * s.matrix()))
}

/// Point at parameter `t` on the geodesic from `a` (t = 0) to `b` (t = 1):
/// `A^{1/2} (A^{-1/2} B A^{-1/2})^t A^{1/2}`.
pub fn geodesic(a: &SpdMatrix, b: &SpdMatrix, t: f64) -> Result<SpdMatrix> {
    check_same_dim(a, b, "geodesic")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "geodesic parameter must lie in [0, 1], got {t}"
        )));
    }
    let s = a.sqrt()?;
    let w = a.invsqrt()?;
    let whitened = sym_part(&(w.matrix() * b.matrix() * w.matrix()));
    let powed = sym_apply(&whitened, SpectralFn::Pow(t))?;
    Ok(SpdMatrix::from_trusted(s.matrix() * powed * s.matrix()))
}
