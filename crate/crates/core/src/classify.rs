//! Manifold classifiers over covariance matrices.
//!
//! Two routes through the same geometry: minimum distance to the per-class
//! Fréchet mean, and a linear classifier on tangent-space features. Both
//! break ties deterministically toward the lowest class index.

use crate::error::{Error, Result};
use crate::spd::{airm_distance, frechet_mean_uniform, log_map, SpdMatrix};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::io::Write;

/// Minimum-distance-to-Riemannian-mean classifier: one Fréchet mean per class.
#[derive(Debug, Clone)]
pub struct MdrmModel {
    class_means: BTreeMap<usize, SpdMatrix>,
    dim: usize,
}

impl MdrmModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_means.keys().copied()
    }

    pub fn class_mean(&self, class: usize) -> Option<&SpdMatrix> {
        self.class_means.get(&class)
    }
}

/// One prediction with the full distance profile.
#[derive(Debug, Clone)]
pub struct MdrmPrediction {
    pub class: usize,
    /// `(class, distance)` in ascending class order.
    pub distances: Vec<(usize, f64)>,
}

/// Fits per-class Fréchet means. Every distinct label in `labels` becomes a
/// class; at least two are required.
pub fn fit_mdrm(covs: &[SpdMatrix], labels: &[usize]) -> Result<MdrmModel> {
    if covs.is_empty() {
        return Err(Error::EmptyInput("fit_mdrm"));
    }
    if covs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "fit_mdrm",
            left: covs.len(),
            right: labels.len(),
        });
    }
    let dim = covs[0].dim();
    let mut by_class: BTreeMap<usize, Vec<SpdMatrix>> = BTreeMap::new();
    for (c, &l) in covs.iter().zip(labels) {
        if c.dim() != dim {
            return Err(Error::DimensionMismatch {
                op: "fit_mdrm",
                expected: dim,
                found: c.dim(),
            });
        }
        by_class.entry(l).or_default().push(c.clone());
    }
    if by_class.len() < 2 {
        return Err(Error::TooFewClasses(by_class.len()));
    }
    let mut class_means = BTreeMap::new();
    for (label, members) in by_class {
        class_means.insert(label, frechet_mean_uniform(&members)?);
    }
    Ok(MdrmModel { class_means, dim })
}

/// Classifies by the nearest class mean under the affine-invariant distance.
pub fn predict_mdrm(model: &MdrmModel, c: &SpdMatrix) -> Result<MdrmPrediction> {
    if c.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            op: "predict_mdrm",
            expected: model.dim,
            found: c.dim(),
        });
    }
    let mut distances = Vec::with_capacity(model.class_means.len());
    for (&label, mean) in &model.class_means {
        distances.push((label, airm_distance(mean, c)?));
    }
    // Strict < keeps the lowest class index on ties.
    let mut best = distances[0];
    for &(label, d) in &distances[1..] {
        if d < best.1 {
            best = (label, d);
        }
    }
    Ok(MdrmPrediction {
        class: best.0,
        distances,
    })
}

/// Norm-preserving vectorization of a symmetric matrix: the upper triangle in
/// row-major order with off-diagonal entries scaled by sqrt(2), so the
/// Euclidean norm of the vector equals the Frobenius norm of the matrix.
pub fn sym_to_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = DVector::zeros(n * (n + 1) / 2);
    let mut k = 0;
    for i in 0..n {
        v[k] = m[(i, i)];
        k += 1;
        for j in (i + 1)..n {
            v[k] = std::f64::consts::SQRT_2 * m[(i, j)];
            k += 1;
        }
    }
    v
}

/// Inverse of [`sym_to_vector`].
pub fn vector_to_sym(v: &DVector<f64>, dim: usize) -> Result<DMatrix<f64>> {
    if v.len() != dim * (dim + 1) / 2 {
        return Err(Error::DimensionMismatch {
            op: "vector_to_sym",
            expected: dim * (dim + 1) / 2,
            found: v.len(),
        });
    }
    let mut m = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        m[(i, i)] = v[k];
        k += 1;
        for j in (i + 1)..dim {
            let x = v[k] / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    Ok(m)
}

/// Tangent-space features of a covariance at a base point.
///
/// The whitened logarithm `log(base^{-1/2} C base^{-1/2})` is vectorized with
/// [`sym_to_vector`], so the feature norm equals the affine-invariant
/// distance from the base.
pub fn tangent_features(c: &SpdMatrix, base: &SpdMatrix) -> Result<DVector<f64>> {
    if c.dim() != base.dim() {
        return Err(Error::DimensionMismatch {
            op: "tangent_features",
            expected: base.dim(),
            found: c.dim(),
        });
    }
    let w = base.invsqrt()?;
    let whitened = SpdMatrix::from_trusted(w.matrix() * c.matrix() * w.matrix());
    Ok(sym_to_vector(&whitened.log()?))
}

/// Multinomial logistic regression over tangent features, trained by
/// full-batch gradient descent. No regularization; desk-scale determinism
/// over tuning.
#[derive(Debug, Clone)]
pub struct TangentClassifier {
    base: SpdMatrix,
    /// Sorted distinct training labels; logits follow this order.
    classes: Vec<usize>,
    weights: DMatrix<f64>, // classes x feature-dim
    bias: DVector<f64>,
}

pub const DEFAULT_TANGENT_EPOCHS: usize = 500;
pub const DEFAULT_TANGENT_LR: f64 = 0.1;

impl TangentClassifier {
    pub fn base(&self) -> &SpdMatrix {
        &self.base
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    /// Logits for one feature vector, in `classes()` order.
    pub fn logits(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.weights.ncols() {
            return Err(Error::DimensionMismatch {
                op: "TangentClassifier::logits",
                expected: self.weights.ncols(),
                found: x.len(),
            });
        }
        Ok(&self.weights * x + &self.bias)
    }

    /// Featurizes a covariance at the stored base and classifies it.
    pub fn predict_covariance(&self, c: &SpdMatrix) -> Result<usize> {
        let x = tangent_features(c, &self.base)?;
        self.predict_features(&x)
    }

    pub fn predict_features(&self, x: &DVector<f64>) -> Result<usize> {
        let z = self.logits(x)?;
        Ok(self.classes[argmax(&z)])
    }
}

/// Fits the linear head on precomputed tangent features; `base` is stored so
/// the classifier can featurize raw covariances at prediction time.
///
/// Returns the model and the per-epoch cross-entropy curve.
pub fn fit_tangent_classifier(
    base: SpdMatrix,
    features: &[DVector<f64>],
    labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<(TangentClassifier, Vec<f64>)> {
    if features.is_empty() {
        return Err(Error::EmptyInput("fit_tangent_classifier"));
    }
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "fit_tangent_classifier",
            left: features.len(),
            right: labels.len(),
        });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::TooFewClasses(classes.len()));
    }
    let feat_dim = features[0].len();
    let n = features.len() as f64;
    let k = classes.len();
    let class_index: BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut weights = DMatrix::zeros(k, feat_dim);
    let mut bias = DVector::zeros(k);
    let mut losses = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        let mut grad_w = DMatrix::zeros(k, feat_dim);
        let mut grad_b = DVector::zeros(k);
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let yi = class_index[&y];
            let z = &weights * x + &bias;
            let p = softmax(&z);
            loss -= p[yi].max(1e-300).ln();
            let mut delta = p;
            delta[yi] -= 1.0;
            grad_w += &delta * x.transpose();
            grad_b += delta;
        }
        loss /= n;
        grad_w /= n;
        grad_b /= n;
        weights -= grad_w * lr;
        bias -= grad_b * lr;
        losses.push(loss);
    }

    Ok((
        TangentClassifier {
            base,
            classes,
            weights,
            bias,
        },
        losses,
    ))
}

pub(crate) fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let exps = z.map(|v| (v - m).exp());
    let sum: f64 = exps.iter().sum();
    exps / sum
}

/// Index of the largest entry; first occurrence wins on ties.
pub(crate) fn argmax(z: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}

/// All pairwise affine-invariant distances: symmetric with a zero diagonal.
pub fn pairwise_distances(covs: &[SpdMatrix]) -> Result<DMatrix<f64>> {
    let n = covs.len();
    if n == 0 {
        return Err(Error::EmptyInput("pairwise_distances"));
    }
    let dim = covs[0].dim();
    for c in covs {
        if c.dim() != dim {
            return Err(Error::DimensionMismatch {
                op: "pairwise_distances",
                expected: dim,
                found: c.dim(),
            });
        }
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = airm_distance(&covs[i], &covs[j])?;
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    Ok(d)
}

/// Writes a distance matrix as CSV: an index header, then one row per matrix
/// entry prefixed with its row index.
pub fn write_distances_csv(d: &DMatrix<f64>, w: &mut impl Write) -> Result<()> {
    write!(w, "index")?;
    for j in 0..d.ncols() {
        write!(w, ",{j}")?;
    }
    writeln!(w)?;
    for i in 0..d.nrows() {
        write!(w, "{i}")?;
        for j in 0..d.ncols() {
            write!(w, ",{}", d[(i, j)])?;
        }
        writeln!(w)?;
    }
    Ok(())
}
