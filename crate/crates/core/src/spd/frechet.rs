//! Fréchet (Karcher) mean under the affine-invariant metric.

use super::{sym_apply, sym_part, SpdMatrix, SpectralFn};
use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Iteration cap for the Karcher flow; plenty for well-conditioned covariance sets.
pub const DEFAULT_KARCHER_MAX_ITER: usize = 50;
/// Convergence threshold on the Frobenius norm of the mean tangent update.
pub const DEFAULT_KARCHER_TOL: f64 = 1e-10;

/// Weighted Fréchet mean by fixed-point iteration with unit step:
/// `G <- exp_G(sum_i w_i log_G(P_i))` until the update's Frobenius norm
/// drops below `tol`.
///
/// Weights must be nonnegative and sum to one. Starts from the weighted
/// arithmetic mean. Non-convergence within `max_iter` is an error carrying
/// the final residual.
pub fn frechet_mean(
    mats: &[SpdMatrix],
    weights: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<SpdMatrix> {
    if mats.is_empty() {
        return Err(Error::EmptyInput("frechet_mean"));
    }
    if mats.len() != weights.len() {
        return Err(Error::LengthMismatch {
            op: "frechet_mean",
            left: mats.len(),
            right: weights.len(),
        });
    }
    let dim = mats[0].dim();
    for m in mats {
        if m.dim() != dim {
            return Err(Error::DimensionMismatch {
                op: "frechet_mean",
                expected: dim,
                found: m.dim(),
            });
        }
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument(
            "frechet_mean: weights must be nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "frechet_mean: weights must sum to 1, got {total}"
        )));
    }
    if mats.len() == 1 {
        return Ok(mats[0].clone());
    }

    // Weighted arithmetic mean is a cheap starting point well inside the cone.
    let mut acc = DMatrix::zeros(dim, dim);
    for (m, &w) in mats.iter().zip(weights) {
        acc += m.matrix() * w;
    }
    let mut g = SpdMatrix::from_trusted(acc);

    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let gs = g.sqrt()?;
        let gis = g.invsqrt()?;
        // Mean of the whitened logs; the tangent update is G^{1/2} S G^{1/2}.
        let mut s = DMatrix::zeros(dim, dim);
        for (m, &w) in mats.iter().zip(weights) {
            let whitened = sym_part(&(gis.matrix() * m.matrix() * gis.matrix()));
            s += sym_apply(&whitened, SpectralFn::Log)? * w;
        }
        residual = (gs.matrix() * &s * gs.matrix()).norm();
        if residual <= tol {
            return Ok(g);
        }
        let step = sym_apply(&s, SpectralFn::Exp)?;
        g = SpdMatrix::from_trusted(gs.matrix() * step * gs.matrix());
    }

    // One last residual check: the final update may have landed us inside tol.
    let gs = g.sqrt()?;
    let gis = g.invsqrt()?;
    let mut s = DMatrix::zeros(dim, dim);
    for (m, &w) in mats.iter().zip(weights) {
        let whitened = sym_part(&(gis.matrix() * m.matrix() * gis.matrix()));
        s += sym_apply(&whitened, SpectralFn::Log)? * w;
    }
    residual = residual.min((gs.matrix() * &s * gs.matrix()).norm());
    if residual <= tol {
        return Ok(g);
    }
    Err(Error::KarcherDidNotConverge {
        max_iter,
        residual,
        tol,
    })
}

/// [`frechet_mean`] with uniform weights and default iteration parameters.
pub fn frechet_mean_uniform(mats: &[SpdMatrix]) -> Result<SpdMatrix> {
    let w = vec![1.0 / mats.len().max(1) as f64; mats.len()];
    frechet_mean(mats, &w, DEFAULT_KARCHER_MAX_ITER, DEFAULT_KARCHER_TOL)
}
