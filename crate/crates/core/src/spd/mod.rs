//! Geometry of symmetric positive-definite matrices.
//!
//! Everything downstream — covariance whitening, minimum-distance classifiers,
//! manifold network layers — is built on the handful of primitives in this
//! module: a validated [`SpdMatrix`] type, the symmetric eigendecomposition
//! with a deterministic sign convention, eigenvalue-wise matrix functions and
//! their exact reverse-mode derivative, the affine-invariant metric with its
//! exp/log maps and geodesics, and the Karcher (Fréchet) mean.
//!
//! All arithmetic is `f64`. Values are immutable after construction and safe
//! to share across threads.

mod eig;
mod frechet;
mod metric;
pub mod sampling;

pub use eig::{eig_fn_backward, eig_sym, spd_apply, sym_apply, EigenFactorization, SpectralFn};
pub use frechet::{frechet_mean, frechet_mean_uniform, DEFAULT_KARCHER_MAX_ITER, DEFAULT_KARCHER_TOL};
pub use metric::{airm_distance, exp_map, geodesic, log_map};

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Relative tolerance for the symmetry invariant: max|M - M'| <= tol * max|M|.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Spectral gap below which Loewner quotients fall back to the derivative.
pub const LOEWNER_DEGENERACY_TOL: f64 = 1e-10;

/// A dense symmetric positive-definite matrix.
///
/// Construction validates symmetry, finiteness and positive-definiteness;
/// afterwards the value is immutable, so every `SpdMatrix` in the program is
/// a genuine point on the SPD manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
}

impl SpdMatrix {
    /// Validates and wraps a dense matrix.
    ///
    /// Fails if the matrix is not square, has non-finite entries, is
    /// asymmetric beyond [`SYMMETRY_TOL`], or has a non-positive eigenvalue.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        check_square(&mat, "SpdMatrix::new")?;
        check_finite(&mat)?;
        check_symmetric(&mat)?;
        // Symmetrize so downstream eigensolves see an exactly symmetric matrix.
        let mat = sym_part(&mat);
        let eig = eig_sym(&mat)?;
        let min = eig.eigenvalues()[0];
        if min <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(SpdMatrix { mat })
    }

    /// Wraps a matrix that is SPD by construction (exp of a symmetric matrix,
    /// congruence of an SPD matrix, ...). Symmetrizes to remove round-off
    /// skew but skips the eigenvalue check.
    pub(crate) fn from_trusted(mat: DMatrix<f64>) -> Self {
        SpdMatrix {
            mat: sym_part(&mat),
        }
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            mat: DMatrix::identity(dim, dim),
        }
    }

    /// Builds `diag(d)`; all entries must be positive.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if let Some(&bad) = diag.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: bad,
            });
        }
        Ok(SpdMatrix {
            mat: DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(diag)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    /// Matrix square root via the spectral decomposition.
    pub fn sqrt(&self) -> Result<SpdMatrix> {
        Ok(SpdMatrix::from_trusted(spd_apply(self, SpectralFn::Sqrt)?))
    }

    /// Inverse matrix square root.
    pub fn invsqrt(&self) -> Result<SpdMatrix> {
        Ok(SpdMatrix::from_trusted(spd_apply(
            self,
            SpectralFn::InvSqrt,
        )?))
    }

    /// Matrix logarithm (a symmetric, generally indefinite matrix).
    pub fn log(&self) -> Result<DMatrix<f64>> {
        spd_apply(self, SpectralFn::Log)
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        Ok(SpdMatrix::from_trusted(spd_apply(
            self,
            SpectralFn::Pow(-1.0),
        )?))
    }

    /// Congruence transform `W * self * W'`, SPD whenever `W` has full row rank.
    pub fn congruence(&self, w: &DMatrix<f64>) -> Result<SpdMatrix> {
        if w.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "congruence",
                expected: self.dim(),
                found: w.ncols(),
            });
        }
        Ok(SpdMatrix::from_trusted(w * &self.mat * w.transpose()))
    }
}

impl AsRef<DMatrix<f64>> for SpdMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.mat
    }
}

/// A tangent vector to the SPD manifold: a symmetric matrix attached to the
/// base point it lives at.
#[derive(Debug, Clone)]
pub struct TangentVector {
    base: SpdMatrix,
    value: DMatrix<f64>,
}

impl TangentVector {
    pub fn new(base: SpdMatrix, value: DMatrix<f64>) -> Result<Self> {
        if value.nrows() != base.dim() || value.ncols() != base.dim() {
            return Err(Error::DimensionMismatch {
                op: "TangentVector::new",
                expected: base.dim(),
                found: value.nrows(),
            });
        }
        check_finite(&value)?;
        check_symmetric(&value)?;
        Ok(TangentVector {
            base,
            value: sym_part(&value),
        })
    }

    pub(crate) fn from_trusted(base: SpdMatrix, value: DMatrix<f64>) -> Self {
        TangentVector {
            base,
            value: sym_part(&value),
        }
    }

    pub fn base(&self) -> &SpdMatrix {
        &self.base
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.value
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }
}

/// Lifts all eigenvalues of a symmetric matrix to at least `floor` and wraps
/// the result as SPD. With `floor = None` the floor is `1e-10 * lambda_max`.
///
/// This is the only repair utility in the crate; [`SpdMatrix::new`] itself
/// never clamps.
pub fn regularize(mat: &DMatrix<f64>, floor: Option<f64>) -> Result<SpdMatrix> {
    let eig = eig_sym(mat)?;
    let lambda_max = eig.eigenvalues()[mat.nrows() - 1];
    let floor = floor.unwrap_or(1e-10 * lambda_max);
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularize: eigenvalue floor must be positive, got {floor:e}"
        )));
    }
    Ok(SpdMatrix::from_trusted(eig.map_eigenvalues(|l| l.max(floor))))
}

// --- shared low-level helpers ---------------------------------------------

pub(crate) fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub(crate) fn check_square(m: &DMatrix<f64>, op: &'static str) -> Result<()> {
    if m.nrows() == m.ncols() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            expected: m.nrows(),
            found: m.ncols(),
        })
    }
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let asym = max_abs(&(m - m.transpose()));
    if asym <= SYMMETRY_TOL * max_abs(m).max(1e-300) {
        Ok(())
    } else {
        Err(Error::NotSymmetric { asymmetry: asym })
    }
}

pub(crate) fn check_same_dim(a: &SpdMatrix, b: &SpdMatrix, op: &'static str) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            expected: a.dim(),
            found: b.dim(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn construction_rejects_asymmetric() {
        let m = dmatrix![1.0, 0.5; 0.2, 1.0];
        assert!(matches!(
            SpdMatrix::new(m),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn construction_rejects_indefinite() {
        let m = dmatrix![1.0, 2.0; 2.0, 1.0]; // eigenvalues -1, 3
        assert!(matches!(
            SpdMatrix::new(m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn construction_rejects_non_finite() {
        let m = dmatrix![1.0, f64::NAN; f64::NAN, 1.0];
        assert!(matches!(SpdMatrix::new(m), Err(Error::NonFinite)));
    }

    #[test]
    fn construction_accepts_spd() {
        let m = dmatrix![2.0, 0.5; 0.5, 1.0];
        let s = SpdMatrix::new(m.clone()).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.matrix(), &m);
    }

    #[test]
    fn from_diagonal_requires_positive_entries() {
        assert!(SpdMatrix::from_diagonal(&[1.0, 0.0]).is_err());
        let d = SpdMatrix::from_diagonal(&[2.0, 3.0]).unwrap();
        assert_eq!(d.matrix()[(1, 1)], 3.0);
    }

    #[test]
    fn regularize_lifts_small_eigenvalues() {
        let m = dmatrix![2.0, 0.0; 0.0, 1e-7];
        let r = regularize(&m, Some(1e-4)).unwrap();
        let eig = eig_sym(r.matrix()).unwrap();
        assert!((eig.eigenvalues()[0] - 1e-4).abs() < 1e-16);
        assert!((eig.eigenvalues()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn regularize_default_floor_scales_with_largest_eigenvalue() {
        let m = dmatrix![4.0, 0.0; 0.0, 0.0];
        let r = regularize(&m, None).unwrap();
        let eig = eig_sym(r.matrix()).unwrap();
        assert!((eig.eigenvalues()[0] - 4e-10).abs() < 1e-20);
    }

    #[test]
    fn regularize_rejects_nonpositive_floor() {
        let m = DMatrix::zeros(2, 2);
        assert!(regularize(&m, None).is_err());
    }

    #[test]
    fn tangent_vector_requires_symmetry() {
        let base = SpdMatrix::identity(2);
        let bad = dmatrix![0.0, 1.0; -1.0, 0.0];
        assert!(TangentVector::new(base, bad).is_err());
    }
}
