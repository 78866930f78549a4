//! Symmetric eigendecomposition, eigenvalue-wise matrix functions, and the
//! exact reverse-mode derivative through them.

use super::{
    check_finite, check_square, check_symmetric, sym_part, SpdMatrix, LOEWNER_DEGENERACY_TOL,
};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Result of [`eig_sym`]: eigenvalues ascending, eigenvectors as orthonormal
/// columns in matching order.
#[derive(Debug, Clone)]
pub struct EigenFactorization {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl EigenFactorization {
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// `U * diag(lambda) * U'` — reproduces the decomposed matrix.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_eigenvalues(|l| l)
    }

    /// `U * diag(f(lambda)) * U'`, symmetrized against round-off.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        let d = DMatrix::from_diagonal(&self.eigenvalues.map(f));
        sym_part(&(u * d * u.transpose()))
    }
}

/// Symmetric eigendecomposition with deterministic ordering.
///
/// Eigenvalues come back ascending; each eigenvector is oriented so its first
/// component of non-negligible magnitude is positive, which pins the (generic)
/// factorization down to a unique representative.
pub fn eig_sym(m: &DMatrix<f64>) -> Result<EigenFactorization> {
    check_square(m, "eig_sym")?;
    check_finite(m)?;
    check_symmetric(m)?;
    let n = m.nrows();
    let eig = sym_part(m)
        .try_symmetric_eigen(f64::EPSILON, 100 * n.max(4) * n.max(4))
        .ok_or(Error::EigenDidNotConverge)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        // Sign convention: first component of appreciable size is positive.
        let lead = col.iter().find(|x| x.abs() > 1e-12).copied().unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.set_column(dst, &(col * sign));
    }

    Ok(EigenFactorization {
        eigenvalues,
        eigenvectors,
    })
}

/// Eigenvalue-wise scalar functions used across the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralFn {
    Log,
    Exp,
    Sqrt,
    InvSqrt,
    Pow(f64),
}

impl SpectralFn {
    fn name(&self) -> &'static str {
        match self {
            SpectralFn::Log => "log",
            SpectralFn::Exp => "exp",
            SpectralFn::Sqrt => "sqrt",
            SpectralFn::InvSqrt => "invsqrt",
            SpectralFn::Pow(_) => "pow",
        }
    }

    fn eval(&self, lambda: f64) -> Result<f64> {
        let out_of_domain = || Error::SpectrumOutOfDomain {
            f: self.name(),
            eigenvalue: lambda,
        };
        match *self {
            SpectralFn::Log => {
                if lambda > 0.0 {
                    Ok(lambda.ln())
                } else {
                    Err(out_of_domain())
                }
            }
            SpectralFn::Exp => Ok(lambda.exp()),
            SpectralFn::Sqrt => {
                if lambda >= 0.0 {
                    Ok(lambda.sqrt())
                } else {
                    Err(out_of_domain())
                }
            }
            SpectralFn::InvSqrt => {
                if lambda > 0.0 {
                    Ok(1.0 / lambda.sqrt())
                } else {
                    Err(out_of_domain())
                }
            }
            SpectralFn::Pow(t) => {
                if lambda > 0.0 || (lambda == 0.0 && t > 0.0) {
                    Ok(lambda.powf(t))
                } else {
                    Err(out_of_domain())
                }
            }
        }
    }
}

/// Applies `f` to the spectrum of a symmetric matrix: `U diag(f(lambda)) U'`.
///
/// Accepts any symmetric input so that `exp` works on tangent values; domain
/// violations (e.g. `log` of a non-positive eigenvalue) are reported.
pub fn sym_apply(m: &DMatrix<f64>, f: SpectralFn) -> Result<DMatrix<f64>> {
    let eig = eig_sym(m)?;
    let mapped: Result<Vec<f64>> = eig.eigenvalues().iter().map(|&l| f.eval(l)).collect();
    let mapped = mapped?;
    let u = eig.eigenvectors();
    let d = DMatrix::from_diagonal(&DVector::from_vec(mapped));
    Ok(sym_part(&(u * d * u.transpose())))
}

/// [`sym_apply`] restricted to SPD inputs.
pub fn spd_apply(s: &SpdMatrix, f: SpectralFn) -> Result<DMatrix<f64>> {
    sym_apply(s.matrix(), f)
}

/// Gradient of `S -> <upstream, U diag(f(lambda)) U'>` with respect to `S`.
///
/// Uses the Daleckii-Krein formula: with `B = U' sym(upstream) U` and the
/// Loewner quotient matrix `K[i,j] = (f(l_i) - f(l_j)) / (l_i - l_j)`
/// (replaced by `df(l_i)` when the gap falls below
/// [`LOEWNER_DEGENERACY_TOL`]), the gradient is `U (K . B) U'`.
pub fn eig_fn_backward(
    s: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    upstream: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if upstream.nrows() != s.nrows() || upstream.ncols() != s.ncols() {
        return Err(Error::DimensionMismatch {
            op: "eig_fn_backward",
            expected: s.nrows(),
            found: upstream.nrows(),
        });
    }
    let eig = eig_sym(s)?;
    let n = s.nrows();
    let lam = eig.eigenvalues();
    let u = eig.eigenvectors();

    let b = u.transpose() * sym_part(upstream) * u;
    let mut kb = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let gap = lam[i] - lam[j];
            let k = if gap.abs() < LOEWNER_DEGENERACY_TOL {
                df(lam[i])
            } else {
                (f(lam[i]) - f(lam[j])) / gap
            };
            kb[(i, j)] = k * b[(i, j)];
        }
    }
    Ok(sym_part(&(u * kb * u.transpose())))
}
