//! Seeded random generation of symmetric / SPD / orthogonal matrices.
//!
//! Used by the synthetic data generator, the property suites, and the benches.

use super::{sym_part, SpdMatrix};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense matrix with i.i.d. standard normal entries.
pub fn random_gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random symmetric matrix with entries of the given scale.
pub fn random_symmetric(rng: &mut impl Rng, dim: usize, scale: f64) -> DMatrix<f64> {
    sym_part(&random_gaussian(rng, dim, dim)) * scale
}

/// Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix,
/// with the R diagonal sign absorbed so the distribution is well defined.
pub fn random_orthogonal(rng: &mut impl Rng, dim: usize) -> DMatrix<f64> {
    let qr = random_gaussian(rng, dim, dim).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Random SPD matrix with eigenvalues drawn uniformly from `eig_range`.
pub fn random_spd(rng: &mut impl Rng, dim: usize, eig_range: (f64, f64)) -> SpdMatrix {
    let (lo, hi) = eig_range;
    assert!(lo > 0.0 && hi >= lo, "eigenvalue range must be positive");
    let q = random_orthogonal(rng, dim);
    let lam = DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            lo + (hi - lo) * rng.random::<f64>()
        } else {
            0.0
        }
    });
    SpdMatrix::from_trusted(&q * lam * q.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::eig_sym;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let q = random_orthogonal(&mut rng, 7);
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(7, 7)).norm() < 1e-12);
    }

    #[test]
    fn random_spd_spectrum_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let s = random_spd(&mut rng, 6, (0.5, 2.0));
        let eig = eig_sym(s.matrix()).unwrap();
        for &l in eig.eigenvalues().iter() {
            assert!(l > 0.5 - 1e-9 && l < 2.0 + 1e-9);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = random_spd(&mut ChaCha20Rng::seed_from_u64(42), 5, (0.1, 5.0));
        let b = random_spd(&mut ChaCha20Rng::seed_from_u64(42), 5, (0.1, 5.0));
        assert_eq!(a.matrix(), b.matrix());
    }
}
