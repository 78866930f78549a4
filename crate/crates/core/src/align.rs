//! Domain-adaptation transforms.
//!
//! Three families, mirroring how the winning BCI transfer pipelines close the
//! gap between subjects and data sets:
//!
//! - **Euclidean / Riemannian alignment** — per-subject spatial whitening by
//!   the inverse square root of the subject's mean trial covariance, so every
//!   subject's mean covariance becomes the identity.
//! - **Label alignment** — per-class linear maps taking source class-mean
//!   covariances onto target class means, which lets training use source data
//!   whose label set differs from the target's.
//! - **Feature standardization** — per-group (subject or data set) mean /
//!   variance normalization of Euclidean latent features.
//!
//! Fitted transforms are immutable and serialize to JSON records with
//! base64-encoded row-major doubles for pipeline caching.

use crate::error::{Error, Result};
use crate::signal::{sample_covariance, SubjectId, Trial};
use crate::spd::{frechet_mean_uniform, SpdMatrix};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which mean defines the whitening reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentKind {
    /// Arithmetic mean of trial covariances (the standard method).
    Euclidean,
    /// Fréchet mean under the affine-invariant metric. A variant of the
    /// published method; the reference mean is geometric rather than
    /// arithmetic.
    Riemannian,
}

/// Which mean summarizes a class for label alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKind {
    #[default]
    Arithmetic,
    Frechet,
}

/// Per-subject whitening transform: `T = R^{-1/2}` for the subject's mean
/// covariance `R`, so `T R T' = I`.
#[derive(Debug, Clone)]
pub struct AlignmentTransform {
    kind: AlignmentKind,
    reference: SpdMatrix,
    map: SpdMatrix,
    scope: SubjectId,
}

impl AlignmentTransform {
    fn from_reference(kind: AlignmentKind, reference: SpdMatrix, scope: SubjectId) -> Result<Self> {
        let map = reference.invsqrt()?;
        Ok(AlignmentTransform {
            kind,
            reference,
            map,
            scope,
        })
    }

    pub fn kind(&self) -> AlignmentKind {
        self.kind
    }

    /// The mean covariance the transform whitens against.
    pub fn reference(&self) -> &SpdMatrix {
        &self.reference
    }

    /// The whitening map `R^{-1/2}` (symmetric).
    pub fn map(&self) -> &DMatrix<f64> {
        self.map.matrix()
    }

    pub fn scope(&self) -> SubjectId {
        self.scope
    }

    /// Congruence transform of a covariance: `T C T'`.
    pub fn transform_covariance(&self, c: &SpdMatrix) -> Result<SpdMatrix> {
        c.congruence(self.map.matrix())
    }

    pub fn to_json(&self) -> String {
        let record = AlignmentTransformRecord {
            kind: self.kind,
            scope: self.scope,
            reference: MatrixRecord::from_matrix(self.reference.matrix()),
            map: MatrixRecord::from_matrix(self.map.matrix()),
        };
        serde_json::to_string_pretty(&record).expect("alignment record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let record: AlignmentTransformRecord = serde_json::from_str(s)?;
        let reference = SpdMatrix::new(record.reference.to_matrix()?)?;
        let map = SpdMatrix::new(record.map.to_matrix()?)?;
        // Cached records must still satisfy T R T' = I.
        let probe = reference.congruence(map.matrix())?;
        let dev = (probe.matrix() - DMatrix::identity(reference.dim(), reference.dim())).norm();
        if dev > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "alignment record inconsistent: |T R T' - I| = {dev:.3e}"
            )));
        }
        Ok(AlignmentTransform {
            kind: record.kind,
            reference,
            map,
            scope: record.scope,
        })
    }
}

/// Fits Euclidean Alignment on one subject's trials: the reference is the
/// arithmetic mean of the raw (unshrunk) trial covariances, optionally
/// shrunk toward the scaled identity at the pooled level.
///
/// With `shrinkage = 0` the transformed trials' mean covariance is exactly
/// the identity; that is the estimator the post-conditions are stated for.
pub fn fit_euclidean_alignment(trials: &[Trial], shrinkage: f64) -> Result<AlignmentTransform> {
    let reference = pooled_mean_covariance(trials, shrinkage)?;
    let scope = trials[0].subject;
    AlignmentTransform::from_reference(AlignmentKind::Euclidean, reference, scope)
}

/// Riemannian variant: the reference is the Fréchet mean of the per-trial
/// covariance estimates (each estimated with the given shrinkage).
pub fn fit_riemannian_alignment(trials: &[Trial], shrinkage: f64) -> Result<AlignmentTransform> {
    if trials.is_empty() {
        return Err(Error::EmptyInput("fit_riemannian_alignment"));
    }
    let covs: Result<Vec<SpdMatrix>> = trials
        .iter()
        .map(|t| sample_covariance(t, shrinkage).map(|e| e.cov))
        .collect();
    let reference = frechet_mean_uniform(&covs?)?;
    AlignmentTransform::from_reference(AlignmentKind::Riemannian, reference, trials[0].subject)
}

fn pooled_mean_covariance(trials: &[Trial], shrinkage: f64) -> Result<SpdMatrix> {
    if trials.is_empty() {
        return Err(Error::EmptyInput("alignment fit"));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidArgument(format!(
            "shrinkage must lie in [0, 1], got {shrinkage}"
        )));
    }
    let n = trials[0].channels();
    let mut acc = DMatrix::zeros(n, n);
    for t in trials {
        if t.channels() != n {
            return Err(Error::DimensionMismatch {
                op: "alignment fit",
                expected: n,
                found: t.channels(),
            });
        }
        acc += crate::signal::raw_covariance(t.signal());
    }
    acc /= trials.len() as f64;
    let target = acc.trace() / n as f64;
    let mut pooled = acc * (1.0 - shrinkage);
    for i in 0..n {
        pooled[(i, i)] += shrinkage * target;
    }
    SpdMatrix::new(pooled)
}

/// Applies a whitening transform to a trial: `signal' = T signal`, metadata
/// untouched.
pub fn apply_alignment(transform: &AlignmentTransform, trial: &Trial) -> Result<Trial> {
    if trial.channels() != transform.map.dim() {
        return Err(Error::DimensionMismatch {
            op: "apply_alignment",
            expected: transform.map.dim(),
            found: trial.channels(),
        });
    }
    Ok(trial.with_signal(transform.map.matrix() * trial.signal(), None))
}

/// Per-class linear maps from source class distributions onto target class
/// distributions: `T_c = R_t^{1/2} R_s^{-1/2}`, so `T_c R_s T_c' = R_t`.
#[derive(Debug, Clone)]
pub struct LabelAlignmentMap {
    pairs: Vec<LabelPairTransform>,
}

#[derive(Debug, Clone)]
pub struct LabelPairTransform {
    pub source_class: usize,
    pub target_class: usize,
    map: DMatrix<f64>,
    source_mean: SpdMatrix,
    target_mean: SpdMatrix,
}

impl LabelPairTransform {
    pub fn map(&self) -> &DMatrix<f64> {
        &self.map
    }

    pub fn source_mean(&self) -> &SpdMatrix {
        &self.source_mean
    }

    pub fn target_mean(&self) -> &SpdMatrix {
        &self.target_mean
    }
}

impl LabelAlignmentMap {
    pub fn pairs(&self) -> &[LabelPairTransform] {
        &self.pairs
    }

    pub fn transform_for(&self, source_class: usize) -> Option<&LabelPairTransform> {
        self.pairs.iter().find(|p| p.source_class == source_class)
    }

    /// Projects a source-class covariance into the target class distribution.
    pub fn transform_covariance(&self, source_class: usize, c: &SpdMatrix) -> Result<SpdMatrix> {
        let pair = self
            .transform_for(source_class)
            .ok_or(Error::EmptyClass(source_class))?;
        c.congruence(&pair.map)
    }

    /// Applies the class map to a labeled source trial and rewrites its label
    /// to the target class.
    pub fn transform_trial(&self, trial: &Trial) -> Result<Trial> {
        let label = trial.label.ok_or(Error::EmptyInput(
            "label alignment needs a labeled trial",
        ))?;
        let pair = self.transform_for(label).ok_or(Error::EmptyClass(label))?;
        if trial.channels() != pair.map.nrows() {
            return Err(Error::DimensionMismatch {
                op: "label alignment",
                expected: pair.map.nrows(),
                found: trial.channels(),
            });
        }
        let mut out = trial.with_signal(&pair.map * trial.signal(), None);
        out.label = Some(pair.target_class);
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let record = LabelAlignmentRecord {
            pairs: self
                .pairs
                .iter()
                .map(|p| LabelPairRecord {
                    source_class: p.source_class,
                    target_class: p.target_class,
                    map: MatrixRecord::from_matrix(&p.map),
                    source_mean: MatrixRecord::from_matrix(p.source_mean.matrix()),
                    target_mean: MatrixRecord::from_matrix(p.target_mean.matrix()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&record).expect("label alignment record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let record: LabelAlignmentRecord = serde_json::from_str(s)?;
        let mut pairs = Vec::with_capacity(record.pairs.len());
        for p in record.pairs {
            pairs.push(LabelPairTransform {
                source_class: p.source_class,
                target_class: p.target_class,
                map: p.map.to_matrix()?,
                source_mean: SpdMatrix::new(p.source_mean.to_matrix()?)?,
                target_mean: SpdMatrix::new(p.target_mean.to_matrix()?)?,
            });
        }
        Ok(LabelAlignmentMap { pairs })
    }
}

/// Fits label alignment from labeled covariances on both sides.
///
/// For every `(source_class, target_class)` pair the class means `R_s`, `R_t`
/// are taken (arithmetic by default, Fréchet behind the flag for ablation)
/// and the map is `T_c = R_t^{1/2} R_s^{-1/2}`.
pub fn fit_label_alignment(
    source: &[(usize, &SpdMatrix)],
    target: &[(usize, &SpdMatrix)],
    class_pairs: &[(usize, usize)],
    mean: MeanKind,
) -> Result<LabelAlignmentMap> {
    if class_pairs.is_empty() {
        return Err(Error::EmptyInput("fit_label_alignment: no class pairs"));
    }
    let mut pairs = Vec::with_capacity(class_pairs.len());
    for &(source_class, target_class) in class_pairs {
        let source_mean = class_mean(source, source_class, mean)?;
        let target_mean = class_mean(target, target_class, mean)?;
        let map = target_mean.sqrt()?.matrix() * source_mean.invsqrt()?.matrix();
        pairs.push(LabelPairTransform {
            source_class,
            target_class,
            map,
            source_mean,
            target_mean,
        });
    }
    Ok(LabelAlignmentMap { pairs })
}

fn class_mean(labeled: &[(usize, &SpdMatrix)], class: usize, mean: MeanKind) -> Result<SpdMatrix> {
    let members: Vec<&SpdMatrix> = labeled
        .iter()
        .filter(|(c, _)| *c == class)
        .map(|(_, m)| *m)
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    match mean {
        MeanKind::Arithmetic => {
            let dim = members[0].dim();
            let mut acc = DMatrix::zeros(dim, dim);
            for m in &members {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        op: "class_mean",
                        expected: dim,
                        found: m.dim(),
                    });
                }
                acc += m.matrix();
            }
            SpdMatrix::new(acc / members.len() as f64)
        }
        MeanKind::Frechet => {
            let owned: Vec<SpdMatrix> = members.into_iter().cloned().collect();
            frechet_mean_uniform(&owned)
        }
    }
}

/// Per-group mean / standard-deviation statistics over latent feature
/// vectors, with a floor on the standard deviation.
///
/// The grouping key is the caller's choice (subject or data set identifier);
/// the published method is ambiguous about which, so it stays configuration.
#[derive(Debug, Clone)]
pub struct FeatureStandardizer {
    floor: f64,
    groups: BTreeMap<u32, GroupStats>,
}

#[derive(Debug, Clone)]
struct GroupStats {
    mean: DVector<f64>,
    std: DVector<f64>,
}

/// Default standard-deviation floor.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-8;

/// Fits per-group statistics over `(group, feature)` pairs. Groups with a
/// single vector get `std = floor` throughout. Labels are never consulted,
/// so inference-time statistics may come from unlabeled trials.
pub fn fit_feature_standardizer(
    features: &[(u32, DVector<f64>)],
    floor: f64,
) -> Result<FeatureStandardizer> {
    if features.is_empty() {
        return Err(Error::EmptyInput("fit_feature_standardizer"));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma floor must be positive, got {floor}"
        )));
    }
    let dim = features[0].1.len();
    let mut grouped: BTreeMap<u32, Vec<&DVector<f64>>> = BTreeMap::new();
    for (g, f) in features {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                op: "fit_feature_standardizer",
                expected: dim,
                found: f.len(),
            });
        }
        grouped.entry(*g).or_default().push(f);
    }
    let mut groups = BTreeMap::new();
    for (g, members) in grouped {
        let n = members.len() as f64;
        let mut mean = DVector::zeros(dim);
        for f in &members {
            mean += *f;
        }
        mean /= n;
        let mut var = DVector::zeros(dim);
        for f in &members {
            let d = *f - &mean;
            var += d.component_mul(&d);
        }
        var /= n;
        let std = var.map(|v| v.sqrt().max(floor));
        groups.insert(g, GroupStats { mean, std });
    }
    Ok(FeatureStandardizer { floor, groups })
}

impl FeatureStandardizer {
    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn groups(&self) -> impl Iterator<Item = u32> + '_ {
        self.groups.keys().copied()
    }

    /// `(x - mean_g) / std_g` for one vector.
    pub fn apply_one(&self, x: &DVector<f64>, group: u32) -> Result<DVector<f64>> {
        let stats = self.groups.get(&group).ok_or(Error::UnknownGroup(group))?;
        if x.len() != stats.mean.len() {
            return Err(Error::DimensionMismatch {
                op: "apply_standardizer",
                expected: stats.mean.len(),
                found: x.len(),
            });
        }
        Ok((x - &stats.mean).component_div(&stats.std))
    }

    /// Standardizes a batch of vectors from one group.
    pub fn apply(&self, xs: &[DVector<f64>], group: u32) -> Result<Vec<DVector<f64>>> {
        xs.iter().map(|x| self.apply_one(x, group)).collect()
    }

    pub fn to_json(&self) -> String {
        let record = StandardizerRecord {
            floor: self.floor,
            groups: self
                .groups
                .iter()
                .map(|(g, s)| GroupRecord {
                    group: *g,
                    mean: VectorRecord::from_vector(&s.mean),
                    std: VectorRecord::from_vector(&s.std),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&record).expect("standardizer record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let record: StandardizerRecord = serde_json::from_str(s)?;
        let mut groups = BTreeMap::new();
        for g in record.groups {
            groups.insert(
                g.group,
                GroupStats {
                    mean: g.mean.to_vector()?,
                    std: g.std.to_vector()?,
                },
            );
        }
        Ok(FeatureStandardizer {
            floor: record.floor,
            groups,
        })
    }
}

// --- JSON records with base64-encoded doubles ------------------------------

#[derive(Serialize, Deserialize)]
struct AlignmentTransformRecord {
    kind: AlignmentKind,
    scope: SubjectId,
    reference: MatrixRecord,
    map: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
struct LabelAlignmentRecord {
    pairs: Vec<LabelPairRecord>,
}

#[derive(Serialize, Deserialize)]
struct LabelPairRecord {
    source_class: usize,
    target_class: usize,
    map: MatrixRecord,
    source_mean: MatrixRecord,
    target_mean: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
struct StandardizerRecord {
    floor: f64,
    groups: Vec<GroupRecord>,
}

#[derive(Serialize, Deserialize)]
struct GroupRecord {
    group: u32,
    mean: VectorRecord,
    std: VectorRecord,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    /// Row-major little-endian f64, base64.
    data: String,
}

impl MatrixRecord {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        MatrixRecord {
            rows: m.nrows(),
            cols: m.ncols(),
            data: BASE64.encode(bytes),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::InvalidArgument(format!("bad base64 matrix payload: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::InvalidArgument(format!(
                "matrix payload holds {} bytes, expected {}",
                bytes.len(),
                self.rows * self.cols * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // Payload is row-major; index explicitly rather than relying on the
        // constructor's fill order.
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
            values[i * self.cols + j]
        }))
    }
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    len: usize,
    data: String,
}

impl VectorRecord {
    fn from_vector(v: &DVector<f64>) -> Self {
        let mut bytes = Vec::with_capacity(v.len() * 8);
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        VectorRecord {
            len: v.len(),
            data: BASE64.encode(bytes),
        }
    }

    fn to_vector(&self) -> Result<DVector<f64>> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::InvalidArgument(format!("bad base64 vector payload: {e}")))?;
        if bytes.len() != self.len * 8 {
            return Err(Error::InvalidArgument(format!(
                "vector payload holds {} bytes, expected {}",
                bytes.len(),
                self.len * 8
            )));
        }
        Ok(DVector::from_iterator(
            self.len,
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        ))
    }
}
