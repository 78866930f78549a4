//! Manifold network over covariance matrices with manual backpropagation.
//!
//! Per-subject bilinear front-ends feed a shared trunk of
//! BiMap -> RBN -> ReEig blocks; a LogEig layer flattens onto Euclidean
//! features where an optional permutation-equivariant set layer, a learned
//! subject embedding, two fully connected layers with dropout in between, and
//! per-data-set linear heads finish the job. Training combines one batch per
//! data set per step under a weighted cross-entropy sum; Euclidean parameters
//! take Adam steps while BiMap weights stay on the Stiefel manifold via
//! projected gradients and QR retraction, and the RBN bias stays SPD via the
//! exponential map.

mod checkpoint;
mod karcher;
mod layers;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use karcher::{karcher_mean_taped, karcher_vjp, KarcherTape};
pub use layers::{
    logeig_backward, logeig_forward, relu, relu_backward, BiMapLayer, DeepSetAlignLayer,
    DeepSetCache, DeepSetGrads, FcGrads, FcLayer, RbnCache, RbnLayer, ReEigLayer,
    DEFAULT_RBN_MOMENTUM, DEFAULT_REEIG_EPS, STIEFEL_TOL,
};
pub use train::{train, DomainData, DomainRole, LossRecord, TrainLog};

use crate::classify::{argmax, softmax};
use crate::error::{Error, Result};
use crate::signal::{DomainId, SubjectId};
use crate::spd::SpdMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

/// Length of the learned per-subject encoding.
pub const EMBED_DIM: usize = 15;

/// Whether a forward pass normalizes with batch statistics or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hyperparameters for model construction and training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch drawn from the target data set each step.
    pub target_batch: usize,
    /// Mini-batch drawn from every source data set each step.
    pub source_batch: usize,
    /// Per-domain weights in the summed loss; unlisted domains weigh 1.
    pub loss_weights: BTreeMap<DomainId, f64>,
    pub dropout: f64,
    pub seed: u64,
    pub reeig_eps: f64,
    pub rbn_momentum: f64,
    /// Output widths of the two trunk BiMap blocks (clamped to the input dim).
    pub trunk_widths: (usize, usize),
    /// Widths of the two fully connected layers.
    pub fc_widths: (usize, usize),
    /// Embedding width of the set-alignment layer; `None` disables it.
    pub deepset_embed: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 20,
            target_batch: 16,
            source_batch: 64,
            loss_weights: BTreeMap::new(),
            dropout: 0.5,
            seed: 0,
            reeig_eps: DEFAULT_REEIG_EPS,
            rbn_momentum: DEFAULT_RBN_MOMENTUM,
            trunk_widths: (16, 8),
            fc_widths: (32, 16),
            deepset_embed: None,
        }
    }
}

impl TrainConfig {
    pub fn loss_weight(&self, domain: DomainId) -> f64 {
        self.loss_weights.get(&domain).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid_config("lr", "must be finite and nonnegative"));
        }
        if self.target_batch == 0 || self.source_batch == 0 {
            return Err(Error::invalid_config("batch", "batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_config("dropout", "must lie in [0, 1)"));
        }
        if !(self.reeig_eps > 0.0) {
            return Err(Error::invalid_config("reeig_eps", "must be positive"));
        }
        if !(0.0 < self.rbn_momentum && self.rbn_momentum < 1.0) {
            return Err(Error::invalid_config("rbn_momentum", "must lie in (0, 1)"));
        }
        if self.trunk_widths.0 == 0 || self.trunk_widths.1 == 0 {
            return Err(Error::invalid_config("trunk_widths", "must be positive"));
        }
        if self.fc_widths.0 == 0 || self.fc_widths.1 == 0 {
            return Err(Error::invalid_config("fc_widths", "must be positive"));
        }
        if let Some(e) = self.deepset_embed {
            if e == 0 {
                return Err(Error::invalid_config("deepset_embed", "must be positive"));
            }
        }
        if self.loss_weights.values().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid_config("loss_weights", "must be nonnegative"));
        }
        Ok(())
    }
}

/// The full model. Immutable during inference; `train` mutates it under
/// exclusive access.
#[derive(Debug, Clone)]
pub struct SpdNetModel {
    input_dim: usize,
    fronts: BTreeMap<SubjectId, BiMapLayer>,
    fallback_front: BiMapLayer,
    bimap1: BiMapLayer,
    rbn1: RbnLayer,
    reeig1: ReEigLayer,
    bimap2: BiMapLayer,
    rbn2: RbnLayer,
    reeig2: ReEigLayer,
    deepset: Option<DeepSetAlignLayer>,
    embeddings: BTreeMap<SubjectId, DVector<f64>>,
    fallback_embedding: DVector<f64>,
    fc1: FcLayer,
    fc2: FcLayer,
    heads: BTreeMap<DomainId, FcLayer>,
    dropout: f64,
}

impl SpdNetModel {
    /// Builds a randomly initialized model for the given subjects and domains
    /// (`domains` pairs each data set with its class count). Initialization
    /// is fully determined by `cfg.seed`.
    pub fn new(
        input_dim: usize,
        subjects: &[SubjectId],
        domains: &[(DomainId, usize)],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid_config("input_dim", "must be positive"));
        }
        if subjects.is_empty() {
            return Err(Error::EmptyInput("SpdNetModel::new: no subjects"));
        }
        if domains.is_empty() {
            return Err(Error::EmptyInput("SpdNetModel::new: no domains"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let d1 = cfg.trunk_widths.0.min(input_dim);
        let d2 = cfg.trunk_widths.1.min(d1);
        let feat_dim = d2 * (d2 + 1) / 2;

        let mut sorted_subjects: Vec<SubjectId> = subjects.to_vec();
        sorted_subjects.sort_unstable();
        sorted_subjects.dedup();
        let mut sorted_domains: Vec<(DomainId, usize)> = domains.to_vec();
        sorted_domains.sort_unstable();

        let mut fronts = BTreeMap::new();
        for &s in &sorted_subjects {
            fronts.insert(s, BiMapLayer::random_init(&mut rng, input_dim, input_dim));
        }
        let fallback_front = BiMapLayer::random_init(&mut rng, input_dim, input_dim);
        let bimap1 = BiMapLayer::random_init(&mut rng, input_dim, d1);
        let bimap2 = BiMapLayer::random_init(&mut rng, d1, d2);
        let rbn1 = RbnLayer::new(d1, cfg.rbn_momentum)?;
        let rbn2 = RbnLayer::new(d2, cfg.rbn_momentum)?;
        let reeig = ReEigLayer::new(cfg.reeig_eps)?;

        let deepset = cfg
            .deepset_embed
            .map(|e| DeepSetAlignLayer::near_identity_init(&mut rng, feat_dim, e));

        let mut embeddings = BTreeMap::new();
        for &s in &sorted_subjects {
            embeddings.insert(s, random_embedding(&mut rng));
        }
        let fallback_embedding = random_embedding(&mut rng);

        let fc1 = FcLayer::random_init(&mut rng, feat_dim + EMBED_DIM, cfg.fc_widths.0);
        let fc2 = FcLayer::random_init(&mut rng, cfg.fc_widths.0, cfg.fc_widths.1);
        let mut heads = BTreeMap::new();
        for &(d, classes) in &sorted_domains {
            if classes < 2 {
                return Err(Error::TooFewClasses(classes));
            }
            heads.insert(d, FcLayer::random_init(&mut rng, cfg.fc_widths.1, classes));
        }

        Ok(SpdNetModel {
            input_dim,
            fronts,
            fallback_front,
            bimap1,
            rbn1,
            reeig1: reeig,
            bimap2,
            rbn2,
            reeig2: reeig,
            deepset,
            embeddings,
            fallback_embedding,
            fc1,
            fc2,
            heads,
            dropout: cfg.dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn subjects(&self) -> impl Iterator<Item = SubjectId> + '_ {
        self.fronts.keys().copied()
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.heads.keys().copied()
    }

    pub fn classes_of(&self, domain: DomainId) -> Option<usize> {
        self.heads.get(&domain).map(|h| h.w.nrows())
    }

    pub fn has_deepset(&self) -> bool {
        self.deepset.is_some()
    }

    pub fn head(&self, domain: DomainId) -> Option<&FcLayer> {
        self.heads.get(&domain)
    }

    /// Worst Stiefel-constraint violation over every BiMap in the model.
    pub fn max_stiefel_error(&self) -> f64 {
        let mut worst = self
            .fallback_front
            .stiefel_error()
            .max(self.bimap1.stiefel_error())
            .max(self.bimap2.stiefel_error());
        for f in self.fronts.values() {
            worst = worst.max(f.stiefel_error());
        }
        worst
    }

    fn front_for(&self, subject: SubjectId) -> &BiMapLayer {
        // Subjects never seen in training fall back to the shared front-end.
        self.fronts.get(&subject).unwrap_or(&self.fallback_front)
    }

    fn embedding_for(&self, subject: SubjectId) -> &DVector<f64> {
        self.embeddings
            .get(&subject)
            .unwrap_or(&self.fallback_embedding)
    }

    /// Manifold part of the forward pass, up to LogEig features.
    fn features(&self, cov: &SpdMatrix, front: &BiMapLayer, mode: Mode) -> Result<DVector<f64>> {
        if cov.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                op: "model_forward",
                expected: self.input_dim,
                found: cov.dim(),
            });
        }
        let x1 = front.forward(cov)?;
        let x2 = self.bimap1.forward(&x1)?;
        let x3 = match mode {
            Mode::Eval => self.rbn1.forward_eval(&x2)?,
            Mode::Train => {
                let (mut out, _) = self.rbn1.forward_train(std::slice::from_ref(&x2))?;
                out.pop().expect("singleton batch")
            }
        };
        let x4 = self.reeig1.forward(&x3)?;
        let x5 = self.bimap2.forward(&x4)?;
        let x6 = match mode {
            Mode::Eval => self.rbn2.forward_eval(&x5)?,
            Mode::Train => {
                let (mut out, _) = self.rbn2.forward_train(std::slice::from_ref(&x5))?;
                out.pop().expect("singleton batch")
            }
        };
        let x7 = self.reeig2.forward(&x6)?;
        logeig_forward(&x7)
    }

    /// Euclidean tail: embedding concatenation, the two fully connected
    /// layers and the domain head. Dropout is a training-loop concern and is
    /// never applied here.
    fn classify_features(
        &self,
        z: &DVector<f64>,
        subject: SubjectId,
        domain: DomainId,
    ) -> Result<DVector<f64>> {
        let head = self
            .heads
            .get(&domain)
            .ok_or(Error::UnknownDomain(domain.0))?;
        let h0 = concat(z, self.embedding_for(subject));
        let h1 = relu(&self.fc1.forward(&h0)?);
        let h2 = relu(&self.fc2.forward(&h1)?);
        head.forward(&h2)
    }

    /// Logits for one covariance. In train mode the batch statistics of the
    /// singleton batch are used; eval mode is deterministic given the model.
    pub fn forward(
        &self,
        cov: &SpdMatrix,
        subject: SubjectId,
        domain: DomainId,
        mode: Mode,
    ) -> Result<DVector<f64>> {
        let mut z = self.features(cov, self.front_for(subject), mode)?;
        if let Some(ds) = &self.deepset {
            let (mut out, _) = ds.forward(std::slice::from_ref(&z))?;
            z = out.pop().expect("singleton set");
        }
        self.classify_features(&z, subject, domain)
    }

    /// Classifies a set of covariances from one subject. With the set layer
    /// enabled the whole set shapes each trial's features (order never
    /// matters); without it this equals the per-trial argmax of [`Self::forward`].
    pub fn predict(
        &self,
        covs: &[SpdMatrix],
        subject: SubjectId,
        domain: DomainId,
    ) -> Result<Vec<usize>> {
        if covs.is_empty() {
            return Err(Error::EmptyInput("predict"));
        }
        let front = self.front_for(subject);
        let mut feats = Vec::with_capacity(covs.len());
        for c in covs {
            feats.push(self.features(c, front, Mode::Eval)?);
        }
        if let Some(ds) = &self.deepset {
            let (updated, _) = ds.forward(&feats)?;
            feats = updated;
        }
        let mut out = Vec::with_capacity(covs.len());
        for z in &feats {
            let logits = self.classify_features(z, subject, domain)?;
            out.push(argmax(&logits));
        }
        Ok(out)
    }

    /// Softmax probabilities for one covariance in eval mode.
    pub fn predict_proba(
        &self,
        cov: &SpdMatrix,
        subject: SubjectId,
        domain: DomainId,
    ) -> Result<DVector<f64>> {
        Ok(softmax(&self.forward(cov, subject, domain, Mode::Eval)?))
    }
}

fn random_embedding(rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(EMBED_DIM, |_, _| {
        0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::sampling;

    fn tiny_model(seed: u64, deepset: bool) -> SpdNetModel {
        let cfg = TrainConfig {
            seed,
            trunk_widths: (6, 4),
            fc_widths: (12, 8),
            deepset_embed: if deepset { Some(5) } else { None },
            ..TrainConfig::default()
        };
        SpdNetModel::new(
            8,
            &[SubjectId(0), SubjectId(1)],
            &[(DomainId(0), 3), (DomainId(1), 4)],
            &cfg,
        )
        .unwrap()
    }

    #[test]
    fn forward_is_reproducible_bit_for_bit() {
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let cov = sampling::random_spd(&mut rng, 8, (0.5, 2.0));
        let a = tiny_model(7, false);
        let b = tiny_model(7, false);
        let la = a.forward(&cov, SubjectId(0), DomainId(0), Mode::Eval).unwrap();
        let lb = b.forward(&cov, SubjectId(0), DomainId(0), Mode::Eval).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let cov = sampling::random_spd(&mut rng, 8, (0.5, 2.0));
        let model = tiny_model(1, true);
        let p = model.predict_proba(&cov, SubjectId(1), DomainId(1)).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn identical_front_ends_give_identical_logits() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let cov = sampling::random_spd(&mut rng, 8, (0.5, 2.0));
        let mut model = tiny_model(3, false);
        // Copy subject 0's front and embedding onto subject 1.
        let front = model.fronts[&SubjectId(0)].clone();
        let embed = model.embeddings[&SubjectId(0)].clone();
        model.fronts.insert(SubjectId(1), front);
        model.embeddings.insert(SubjectId(1), embed);
        let l0 = model.forward(&cov, SubjectId(0), DomainId(0), Mode::Eval).unwrap();
        let l1 = model.forward(&cov, SubjectId(1), DomainId(0), Mode::Eval).unwrap();
        assert_eq!(l0, l1);
    }

    #[test]
    fn unknown_subject_uses_fallback_front() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let cov = sampling::random_spd(&mut rng, 8, (0.5, 2.0));
        let model = tiny_model(4, false);
        let via_api = model
            .forward(&cov, SubjectId(99), DomainId(0), Mode::Eval)
            .unwrap();
        let z = model
            .features(&cov, &model.fallback_front, Mode::Eval)
            .unwrap();
        let direct = model.classify_features(&z, SubjectId(99), DomainId(0)).unwrap();
        assert_eq!(via_api, direct);
    }

    #[test]
    fn unknown_domain_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let cov = sampling::random_spd(&mut rng, 8, (0.5, 2.0));
        let model = tiny_model(5, false);
        assert!(matches!(
            model.forward(&cov, SubjectId(0), DomainId(9), Mode::Eval),
            Err(Error::UnknownDomain(9))
        ));
    }

    #[test]
    fn predict_matches_forward_argmax_without_deepset() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let covs: Vec<SpdMatrix> = (0..5)
            .map(|_| sampling::random_spd(&mut rng, 8, (0.4, 2.5)))
            .collect();
        let model = tiny_model(6, false);
        let preds = model.predict(&covs, SubjectId(0), DomainId(0)).unwrap();
        for (c, &p) in covs.iter().zip(&preds) {
            let logits = model.forward(c, SubjectId(0), DomainId(0), Mode::Eval).unwrap();
            assert_eq!(p, argmax(&logits));
        }
    }

    #[test]
    fn prediction_order_invariant_with_deepset() {
        let mut rng = ChaCha20Rng::seed_from_u64(56);
        let covs: Vec<SpdMatrix> = (0..6)
            .map(|_| sampling::random_spd(&mut rng, 8, (0.4, 2.5)))
            .collect();
        let model = tiny_model(8, true);
        let preds = model.predict(&covs, SubjectId(0), DomainId(0)).unwrap();
        let perm = [4usize, 2, 0, 5, 3, 1];
        let shuffled: Vec<SpdMatrix> = perm.iter().map(|&i| covs[i].clone()).collect();
        let preds_p = model.predict(&shuffled, SubjectId(0), DomainId(0)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(preds_p[k], preds[i]);
        }
    }

    #[test]
    fn identity_deepset_equals_plain_pipeline() {
        let mut rng = ChaCha20Rng::seed_from_u64(57);
        let covs: Vec<SpdMatrix> = (0..4)
            .map(|_| sampling::random_spd(&mut rng, 8, (0.4, 2.5)))
            .collect();
        let plain = tiny_model(9, false);
        let mut with_identity = plain.clone();
        let feat_dim = 4 * 5 / 2;
        with_identity.deepset = Some(DeepSetAlignLayer::identity(feat_dim, 5));
        let a = plain.predict(&covs, SubjectId(1), DomainId(1)).unwrap();
        let b = with_identity.predict(&covs, SubjectId(1), DomainId(1)).unwrap();
        assert_eq!(a, b);
    }
}
