//! Covariance-geometry transfer learning for multichannel biosignals.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`spd`] — geometry of symmetric positive-definite matrices: the
//!   affine-invariant metric, exp/log maps, geodesics, Fréchet means, and
//!   exact derivatives through eigenvalue functions.
//! - [`signal`] — trials (channels × samples), channel harmonization,
//!   resampling, and shrinkage covariance estimation.
//! - [`align`] — domain-adaptation transforms: Euclidean / Riemannian
//!   whitening per subject, label alignment across mismatched class sets,
//!   and latent feature standardization.
//! - [`classify`] — minimum-distance-to-mean and tangent-space classifiers,
//!   plus pairwise-distance export.
//! - [`spdnet`] — a manifold network (BiMap / ReEig / RBN / LogEig) with
//!   manual backpropagation, per-subject front-ends, subject embeddings, a
//!   permutation-equivariant set-alignment layer, and per-domain heads.
//! - [`harness`] — synthetic data generation, the dataset file format,
//!   block-wise cross-validation, metrics, and the end-to-end evaluation
//!   pipeline behind the CLI.

pub mod align;
pub mod classify;
pub mod error;
pub mod harness;
pub mod signal;
pub mod spd;
pub mod spdnet;

pub use error::{Error, ErrorCategory, Result};
pub use spd::SpdMatrix;
