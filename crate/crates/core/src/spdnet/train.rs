//! Multi-task training loop: one batch per data set per step, weighted
//! cross-entropy sum, Adam on Euclidean parameters, projected-gradient QR
//! retraction on Stiefel parameters, exponential-map retraction on RBN
//! biases. Bitwise deterministic for a fixed seed and data ordering.

use super::layers::{
    logeig_backward, logeig_forward, relu, relu_backward, BiMapLayer, DeepSetCache, DeepSetGrads,
    RbnCache, FcLayer,
};
use super::{concat, Mode, SpdNetModel, TrainConfig, EMBED_DIM};
use crate::classify::softmax;
use crate::error::{Error, Result};
use crate::signal::{DomainId, SubjectId};
use crate::spd::SpdMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::io::Write;

/// Whether a data set is a transfer source or the adaptation target; targets
/// sample smaller batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

/// Labeled covariances of one data set, flattened over its subjects.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub domain: DomainId,
    pub role: DomainRole,
    pub covs: Vec<SpdMatrix>,
    pub subjects: Vec<SubjectId>,
    pub labels: Vec<usize>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.covs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covs.is_empty()
    }
}

/// One loss measurement: the unweighted cross-entropy of one domain's batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub domain: DomainId,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// CSV with one row per (epoch, step, domain).
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,step,domain,loss")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.epoch, r.step, r.domain.0, r.loss)?;
        }
        Ok(())
    }
}

/// Trains the model in place and returns the loss curve.
///
/// Each step draws one shuffled batch per domain (16 for the target, 64 per
/// source by default), sums the per-domain cross-entropies under the
/// configured weights, and applies a single optimizer step. The shared
/// fallback front-end and embedding are trained on the same batches in a
/// second pass whose gradients touch only them, so unknown-subject inference
/// has a front-end shaped by all source subjects jointly.
pub fn train(model: &mut SpdNetModel, data: &[DomainData], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("train: no domains"));
    }
    for d in data {
        if d.is_empty() {
            return Err(Error::EmptyInput("train: empty domain"));
        }
        if d.covs.len() != d.labels.len() || d.covs.len() != d.subjects.len() {
            return Err(Error::LengthMismatch {
                op: "train",
                left: d.covs.len(),
                right: d.labels.len().min(d.subjects.len()),
            });
        }
        let classes = model
            .classes_of(d.domain)
            .ok_or(Error::UnknownDomain(d.domain.0))?;
        for &l in &d.labels {
            if l >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for domain {} with {classes} classes",
                    d.domain
                )));
            }
        }
        for &s in &d.subjects {
            if !model.fronts.contains_key(&s) {
                return Err(Error::UnknownSubject(s.0));
            }
        }
        for c in &d.covs {
            if c.dim() != model.input_dim() {
                return Err(Error::DimensionMismatch {
                    op: "train",
                    expected: model.input_dim(),
                    found: c.dim(),
                });
            }
        }
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data[i].domain);

    let mut streams: Vec<BatchStream> = order
        .iter()
        .map(|&i| {
            let d = &data[i];
            let batch = match d.role {
                DomainRole::Target => cfg.target_batch,
                DomainRole::Source => cfg.source_batch,
            }
            .min(d.len());
            BatchStream::new(d.len(), batch, derive_seed(cfg.seed, 1, d.domain.0 as u64))
        })
        .collect();
    let steps_per_epoch = streams
        .iter()
        .map(|s| s.batches_per_pass())
        .max()
        .unwrap_or(1);

    let mut dropout_rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
    let mut opt = Adam::new();
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        for step in 0..steps_per_epoch {
            let mut grads = GradAccum::new(model);
            for (slot, &di) in order.iter().enumerate() {
                let domain = &data[di];
                let weight = cfg.loss_weight(domain.domain);
                let idx = streams[slot].next_batch();

                let (loss, tape) = forward_batch(
                    model,
                    domain,
                    &idx,
                    FrontRoute::PerSubject,
                    &mut dropout_rng,
                )?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: global_step });
                }
                log.records.push(LossRecord {
                    epoch,
                    step,
                    domain: domain.domain,
                    loss,
                });
                backward_batch(model, domain, &tape, weight, &mut grads, GradFilter::All)?;
                model.rbn1.update_running_mean(&tape.rbn1_cache)?;
                model.rbn2.update_running_mean(&tape.rbn2_cache)?;

                // Second pass through the shared fallback path; only the
                // fallback parameters receive gradient.
                let (fallback_loss, fb_tape) = forward_batch(
                    model,
                    domain,
                    &idx,
                    FrontRoute::Fallback,
                    &mut dropout_rng,
                )?;
                if !fallback_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: global_step });
                }
                backward_batch(
                    model,
                    domain,
                    &fb_tape,
                    weight,
                    &mut grads,
                    GradFilter::FallbackOnly,
                )?;
            }
            apply_step(model, &grads, &mut opt, cfg.lr)?;
            let stiefel = model.max_stiefel_error();
            if stiefel > super::STIEFEL_TOL {
                return Err(Error::InvalidArgument(format!(
                    "Stiefel constraint violated after step {global_step}: {stiefel:.3e}"
                )));
            }
            global_step += 1;
        }
    }
    Ok(log)
}

/// Documented seed-splitting rule: one SplitMix64 round over the master seed
/// xored with a stream tag and index, so derived streams never collide and
/// parallel evaluation order cannot change results.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E3779B97F4A7C15) ^ index.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Shuffled cyclic index stream: full batches only, reshuffling whenever the
/// remaining pass cannot fill one.
struct BatchStream {
    indices: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha20Rng,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            indices: (0..n).collect(),
            cursor: 0,
            batch,
            rng: ChaCha20Rng::seed_from_u64(seed),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        // Fisher-Yates with our own loop so the stream depends only on the
        // ChaCha output sequence.
        for i in (1..self.indices.len()).rev() {
            let j = (self.rng.random::<u64>() % (i as u64 + 1)) as usize;
            self.indices.swap(i, j);
        }
        self.cursor = 0;
    }

    fn batches_per_pass(&self) -> usize {
        self.indices.len().div_ceil(self.batch)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.indices.len() {
            self.shuffle();
        }
        let out = self.indices[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FrontRoute {
    PerSubject,
    Fallback,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GradFilter {
    All,
    FallbackOnly,
}

/// Every activation one batch needs for its reverse pass.
struct BatchTape {
    route: FrontRoute,
    idx: Vec<usize>,
    x1: Vec<SpdMatrix>,
    x2: Vec<SpdMatrix>,
    rbn1_cache: RbnCache,
    x3: Vec<SpdMatrix>,
    x4: Vec<SpdMatrix>,
    x5: Vec<SpdMatrix>,
    rbn2_cache: RbnCache,
    x6: Vec<SpdMatrix>,
    x7: Vec<SpdMatrix>,
    z: Vec<DVector<f64>>,
    groups: Vec<(SubjectId, Vec<usize>)>,
    ds_caches: Vec<DeepSetCache>,
    z_post: Vec<DVector<f64>>,
    h0: Vec<DVector<f64>>,
    a1: Vec<DVector<f64>>,
    mask: Vec<DVector<f64>>,
    h1d: Vec<DVector<f64>>,
    a2: Vec<DVector<f64>>,
    h2: Vec<DVector<f64>>,
    dlogits: Vec<DVector<f64>>,
}

fn forward_batch(
    model: &SpdNetModel,
    domain: &DomainData,
    idx: &[usize],
    route: FrontRoute,
    dropout_rng: &mut ChaCha20Rng,
) -> Result<(f64, BatchTape)> {
    let n = idx.len();
    let mut x1 = Vec::with_capacity(n);
    for &i in idx {
        let front = match route {
            FrontRoute::PerSubject => &model.fronts[&domain.subjects[i]],
            FrontRoute::Fallback => &model.fallback_front,
        };
        x1.push(front.forward(&domain.covs[i])?);
    }
    let x2: Vec<SpdMatrix> = x1
        .iter()
        .map(|x| model.bimap1.forward(x))
        .collect::<Result<_>>()?;
    let (x3, rbn1_cache) = model.rbn1.forward_train(&x2)?;
    let x4: Vec<SpdMatrix> = x3
        .iter()
        .map(|x| model.reeig1.forward(x))
        .collect::<Result<_>>()?;
    let x5: Vec<SpdMatrix> = x4
        .iter()
        .map(|x| model.bimap2.forward(x))
        .collect::<Result<_>>()?;
    let (x6, rbn2_cache) = model.rbn2.forward_train(&x5)?;
    let x7: Vec<SpdMatrix> = x6
        .iter()
        .map(|x| model.reeig2.forward(x))
        .collect::<Result<_>>()?;
    let z: Vec<DVector<f64>> = x7.iter().map(logeig_forward).collect::<Result<_>>()?;

    // Set layer: each subject's trials within the batch form one set.
    let mut group_map: BTreeMap<SubjectId, Vec<usize>> = BTreeMap::new();
    for (pos, &i) in idx.iter().enumerate() {
        group_map.entry(domain.subjects[i]).or_default().push(pos);
    }
    let groups: Vec<(SubjectId, Vec<usize>)> = group_map.into_iter().collect();
    let mut ds_caches = Vec::new();
    let mut z_post = z.clone();
    if let Some(ds) = &model.deepset {
        for (_, members) in &groups {
            let set: Vec<DVector<f64>> = members.iter().map(|&p| z[p].clone()).collect();
            let (out, cache) = ds.forward(&set)?;
            for (&p, o) in members.iter().zip(out) {
                z_post[p] = o;
            }
            ds_caches.push(cache);
        }
    }

    let keep = 1.0 - model.dropout;
    let mut h0 = Vec::with_capacity(n);
    let mut a1 = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut h1d = Vec::with_capacity(n);
    let mut a2 = Vec::with_capacity(n);
    let mut h2 = Vec::with_capacity(n);
    let mut dlogits = Vec::with_capacity(n);
    let mut loss = 0.0;
    let head = &model.heads[&domain.domain];
    for (pos, &i) in idx.iter().enumerate() {
        let embed = match route {
            FrontRoute::PerSubject => &model.embeddings[&domain.subjects[i]],
            FrontRoute::Fallback => &model.fallback_embedding,
        };
        let h0_i = concat(&z_post[pos], embed);
        let a1_i = model.fc1.forward(&h0_i)?;
        let h1_i = relu(&a1_i);
        let mask_i = DVector::from_fn(h1_i.len(), |_, _| {
            if model.dropout == 0.0 || dropout_rng.random::<f64>() >= model.dropout {
                1.0 / keep
            } else {
                0.0
            }
        });
        let h1d_i = h1_i.component_mul(&mask_i);
        let a2_i = model.fc2.forward(&h1d_i)?;
        let h2_i = relu(&a2_i);
        let logits = head.forward(&h2_i)?;
        let p = softmax(&logits);
        let y = domain.labels[i];
        loss -= p[y].max(1e-300).ln();
        let mut d = p;
        d[y] -= 1.0;
        dlogits.push(d / n as f64);

        h0.push(h0_i);
        a1.push(a1_i);
        mask.push(mask_i);
        h1d.push(h1d_i);
        a2.push(a2_i);
        h2.push(h2_i);
    }
    loss /= n as f64;

    Ok((
        loss,
        BatchTape {
            route,
            idx: idx.to_vec(),
            x1,
            x2,
            rbn1_cache,
            x3,
            x4,
            x5,
            rbn2_cache,
            x6,
            x7,
            z,
            groups,
            ds_caches,
            z_post: z_post.clone(),
            h0,
            a1,
            mask,
            h1d,
            a2,
            h2,
            dlogits,
        },
    ))
}

/// Gradient buffers mirroring the model's parameters.
struct GradAccum {
    fronts: BTreeMap<SubjectId, DMatrix<f64>>,
    fallback_front: DMatrix<f64>,
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    rbn1_bias: DMatrix<f64>,
    rbn2_bias: DMatrix<f64>,
    embeddings: BTreeMap<SubjectId, DVector<f64>>,
    fallback_embedding: DVector<f64>,
    deepset: Option<DeepSetGrads>,
    fc1_w: DMatrix<f64>,
    fc1_b: DVector<f64>,
    fc2_w: DMatrix<f64>,
    fc2_b: DVector<f64>,
    heads: BTreeMap<DomainId, (DMatrix<f64>, DVector<f64>)>,
}

impl GradAccum {
    fn new(model: &SpdNetModel) -> Self {
        let zero_like = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        GradAccum {
            fronts: model
                .fronts
                .iter()
                .map(|(&s, f)| (s, zero_like(f.weight())))
                .collect(),
            fallback_front: zero_like(model.fallback_front.weight()),
            w1: zero_like(model.bimap1.weight()),
            w2: zero_like(model.bimap2.weight()),
            rbn1_bias: DMatrix::zeros(model.rbn1.dim(), model.rbn1.dim()),
            rbn2_bias: DMatrix::zeros(model.rbn2.dim(), model.rbn2.dim()),
            embeddings: model
                .embeddings
                .keys()
                .map(|&s| (s, DVector::zeros(EMBED_DIM)))
                .collect(),
            fallback_embedding: DVector::zeros(EMBED_DIM),
            deepset: model.deepset.as_ref().map(|ds| DeepSetGrads {
                gamma_w: DMatrix::zeros(ds.embed_dim(), ds.feat_dim()),
                gamma_b: DVector::zeros(ds.embed_dim()),
                lambda_w: DMatrix::zeros(ds.feat_dim(), ds.feat_dim() + ds.embed_dim()),
                lambda_b: DVector::zeros(ds.feat_dim()),
            }),
            fc1_w: zero_like(&model.fc1.w),
            fc1_b: DVector::zeros(model.fc1.b.len()),
            fc2_w: zero_like(&model.fc2.w),
            fc2_b: DVector::zeros(model.fc2.b.len()),
            heads: model
                .heads
                .iter()
                .map(|(&d, h)| (d, (zero_like(&h.w), DVector::zeros(h.b.len()))))
                .collect(),
        }
    }
}

fn backward_batch(
    model: &SpdNetModel,
    domain: &DomainData,
    tape: &BatchTape,
    weight: f64,
    grads: &mut GradAccum,
    filter: GradFilter,
) -> Result<()> {
    let n = tape.idx.len();
    let keep_all = filter == GradFilter::All;
    let head = &model.heads[&domain.domain];

    let mut d_z_post: Vec<DVector<f64>> = Vec::with_capacity(n);
    for pos in 0..n {
        let i = tape.idx[pos];
        let du = &tape.dlogits[pos] * weight;
        let (dh2, head_g) = head.backward(&tape.h2[pos], &du);
        if keep_all {
            let slot = grads.heads.get_mut(&domain.domain).expect("head grad slot");
            slot.0 += head_g.w;
            slot.1 += head_g.b;
        }
        let da2 = relu_backward(&tape.a2[pos], &dh2);
        let (dh1d, fc2_g) = model.fc2.backward(&tape.h1d[pos], &da2);
        if keep_all {
            grads.fc2_w += fc2_g.w;
            grads.fc2_b += fc2_g.b;
        }
        let dh1 = dh1d.component_mul(&tape.mask[pos]);
        let da1 = relu_backward(&tape.a1[pos], &dh1);
        let (dh0, fc1_g) = model.fc1.backward(&tape.h0[pos], &da1);
        if keep_all {
            grads.fc1_w += fc1_g.w;
            grads.fc1_b += fc1_g.b;
        }
        let feat = dh0.len() - EMBED_DIM;
        let dz = dh0.rows(0, feat).into_owned();
        let dembed = dh0.rows(feat, EMBED_DIM).into_owned();
        match tape.route {
            FrontRoute::PerSubject => {
                if keep_all {
                    *grads
                        .embeddings
                        .get_mut(&domain.subjects[i])
                        .expect("embedding grad slot") += dembed;
                }
            }
            FrontRoute::Fallback => {
                grads.fallback_embedding += dembed;
            }
        }
        d_z_post.push(dz);
    }

    // Set layer.
    let mut d_z = d_z_post.clone();
    if let Some(ds) = &model.deepset {
        for ((_, members), cache) in tape.groups.iter().zip(&tape.ds_caches) {
            let upstream: Vec<DVector<f64>> =
                members.iter().map(|&p| d_z_post[p].clone()).collect();
            let (d_inputs, ds_g) = ds.backward(cache, &upstream)?;
            for (&p, g) in members.iter().zip(d_inputs) {
                d_z[p] = g;
            }
            if keep_all {
                let acc = grads.deepset.as_mut().expect("deepset grad slot");
                acc.gamma_w += ds_g.gamma_w;
                acc.gamma_b += ds_g.gamma_b;
                acc.lambda_w += ds_g.lambda_w;
                acc.lambda_b += ds_g.lambda_b;
            }
        }
    }

    // Manifold part, batch-wise where the layers are batch-wise.
    let mut d_x7 = Vec::with_capacity(n);
    for pos in 0..n {
        d_x7.push(logeig_backward(&tape.x7[pos], &d_z[pos])?);
    }
    let mut d_x6 = Vec::with_capacity(n);
    for pos in 0..n {
        d_x6.push(model.reeig2.backward(&tape.x6[pos], &d_x7[pos])?);
    }
    let (d_x5, d_bias2) = model.rbn2.backward(&tape.x5, &tape.rbn2_cache, &d_x6)?;
    if keep_all {
        grads.rbn2_bias += d_bias2;
    }
    let mut d_x4 = Vec::with_capacity(n);
    for pos in 0..n {
        let (dx, dw) = model.bimap2.backward(&tape.x4[pos], &d_x5[pos])?;
        if keep_all {
            grads.w2 += dw;
        }
        d_x4.push(dx);
    }
    let mut d_x3 = Vec::with_capacity(n);
    for pos in 0..n {
        d_x3.push(model.reeig1.backward(&tape.x3[pos], &d_x4[pos])?);
    }
    let (d_x2, d_bias1) = model.rbn1.backward(&tape.x2, &tape.rbn1_cache, &d_x3)?;
    if keep_all {
        grads.rbn1_bias += d_bias1;
    }
    for pos in 0..n {
        let i = tape.idx[pos];
        let (d_x1, dw1) = model.bimap1.backward(&tape.x1[pos], &d_x2[pos])?;
        if keep_all {
            grads.w1 += dw1;
        }
        match tape.route {
            FrontRoute::PerSubject => {
                let front = &model.fronts[&domain.subjects[i]];
                let (_, dwf) = front.backward(&domain.covs[i], &d_x1)?;
                if keep_all {
                    *grads
                        .fronts
                        .get_mut(&domain.subjects[i])
                        .expect("front grad slot") += dwf;
                }
            }
            FrontRoute::Fallback => {
                let (_, dwf) = model.fallback_front.backward(&domain.covs[i], &d_x1)?;
                grads.fallback_front += dwf;
            }
        }
    }
    Ok(())
}

/// Adam with per-tensor state, keyed so iteration order is deterministic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ParamKey {
    Embedding(u32),
    FallbackEmbedding,
    DeepSetGammaW,
    DeepSetGammaB,
    DeepSetLambdaW,
    DeepSetLambdaB,
    Fc1W,
    Fc1B,
    Fc2W,
    Fc2B,
    HeadW(u32),
    HeadB(u32),
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

struct Adam {
    states: BTreeMap<ParamKey, AdamState>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new() -> Self {
        Adam {
            states: BTreeMap::new(),
        }
    }

    fn step<'a>(
        &mut self,
        key: ParamKey,
        lr: f64,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
        len: usize,
    ) {
        let state = self.states.entry(key).or_insert_with(|| AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        });
        state.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
        for ((p, &g), k) in params.zip(grads).zip(0..len) {
            state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g;
            state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[k] / bc1;
            let v_hat = state.v[k] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn apply_step(model: &mut SpdNetModel, grads: &GradAccum, opt: &mut Adam, lr: f64) -> Result<()> {
    // Stiefel parameters: projected gradient + QR retraction, plain SGD.
    for (s, front) in model.fronts.iter_mut() {
        front.retract_step(&grads.fronts[s], lr);
    }
    model.fallback_front.retract_step(&grads.fallback_front, lr);
    model.bimap1.retract_step(&grads.w1, lr);
    model.bimap2.retract_step(&grads.w2, lr);

    // SPD parameters: exponential-map retraction of the symmetrized gradient.
    model.rbn1.retract_bias(&grads.rbn1_bias, lr)?;
    model.rbn2.retract_bias(&grads.rbn2_bias, lr)?;

    // Euclidean parameters: Adam.
    for (s, e) in model.embeddings.iter_mut() {
        let g = &grads.embeddings[s];
        opt.step(
            ParamKey::Embedding(s.0),
            lr,
            e.iter_mut(),
            g.iter(),
            EMBED_DIM,
        );
    }
    opt.step(
        ParamKey::FallbackEmbedding,
        lr,
        model.fallback_embedding.iter_mut(),
        grads.fallback_embedding.iter(),
        EMBED_DIM,
    );
    if let (Some(ds), Some(g)) = (model.deepset.as_mut(), grads.deepset.as_ref()) {
        let len = ds.gamma_w.len();
        opt.step(ParamKey::DeepSetGammaW, lr, ds.gamma_w.iter_mut(), g.gamma_w.iter(), len);
        let len = ds.gamma_b.len();
        opt.step(ParamKey::DeepSetGammaB, lr, ds.gamma_b.iter_mut(), g.gamma_b.iter(), len);
        let len = ds.lambda_w.len();
        opt.step(ParamKey::DeepSetLambdaW, lr, ds.lambda_w.iter_mut(), g.lambda_w.iter(), len);
        let len = ds.lambda_b.len();
        opt.step(ParamKey::DeepSetLambdaB, lr, ds.lambda_b.iter_mut(), g.lambda_b.iter(), len);
    }
    let len = model.fc1.w.len();
    opt.step(ParamKey::Fc1W, lr, model.fc1.w.iter_mut(), grads.fc1_w.iter(), len);
    let len = model.fc1.b.len();
    opt.step(ParamKey::Fc1B, lr, model.fc1.b.iter_mut(), grads.fc1_b.iter(), len);
    let len = model.fc2.w.len();
    opt.step(ParamKey::Fc2W, lr, model.fc2.w.iter_mut(), grads.fc2_w.iter(), len);
    let len = model.fc2.b.len();
    opt.step(ParamKey::Fc2B, lr, model.fc2.b.iter_mut(), grads.fc2_b.iter(), len);
    for (d, h) in model.heads.iter_mut() {
        let g = &grads.heads[d];
        let len = h.w.len();
        opt.step(ParamKey::HeadW(d.0), lr, h.w.iter_mut(), g.0.iter(), len);
        let len = h.b.len();
        opt.step(ParamKey::HeadB(d.0), lr, h.b.iter_mut(), g.1.iter(), len);
    }
    Ok(())
}

/// Balanced accuracy of the model on labeled covariances, evaluated per
/// subject so an enabled set layer sees each subject's full set.
pub fn training_balanced_accuracy(model: &SpdNetModel, data: &[DomainData]) -> Result<f64> {
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for d in data {
        let mut by_subject: BTreeMap<SubjectId, Vec<usize>> = BTreeMap::new();
        for (i, &s) in d.subjects.iter().enumerate() {
            by_subject.entry(s).or_default().push(i);
        }
        for (s, idx) in by_subject {
            let covs: Vec<SpdMatrix> = idx.iter().map(|&i| d.covs[i].clone()).collect();
            let preds = model.predict(&covs, s, d.domain)?;
            for (&i, p) in idx.iter().zip(preds) {
                y_true.push(d.labels[i]);
                y_pred.push(p);
            }
        }
    }
    crate::harness::balanced_accuracy(&y_true, &y_pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::sampling;

    /// Separable three-class toy problem: class prototypes far apart, mild
    /// per-subject mixing.
    fn toy_data(seed: u64, dim: usize, subjects_per_domain: usize) -> Vec<DomainData> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let protos: Vec<SpdMatrix> = (0..3)
            .map(|c| {
                let q = sampling::random_orthogonal(&mut rng, dim);
                let lam = DMatrix::from_fn(dim, dim, |i, j| {
                    if i == j {
                        if i % 3 == c {
                            4.0
                        } else {
                            0.5
                        }
                    } else {
                        0.0
                    }
                });
                SpdMatrix::from_trusted(&q * lam * q.transpose())
            })
            .collect();
        let mut out = Vec::new();
        for (d, role) in [(0u32, DomainRole::Source), (1u32, DomainRole::Target)] {
            let mut covs = Vec::new();
            let mut subjects = Vec::new();
            let mut labels = Vec::new();
            for s in 0..subjects_per_domain {
                let sid = SubjectId(d * 100 + s as u32);
                let mix = DMatrix::identity(dim, dim)
                    + sampling::random_gaussian(&mut rng, dim, dim) * 0.05;
                for c in 0..3 {
                    for _ in 0..8 {
                        let jitter = sampling::random_symmetric(&mut rng, dim, 0.05);
                        let noisy = SpdMatrix::from_trusted(
                            protos[c].matrix() + &jitter * 0.2 + DMatrix::identity(dim, dim) * 0.01,
                        );
                        covs.push(noisy.congruence(&mix).unwrap());
                        subjects.push(sid);
                        labels.push(c);
                    }
                }
            }
            out.push(DomainData {
                domain: DomainId(d),
                role,
                covs,
                subjects,
                labels,
            });
        }
        out
    }

    fn toy_model(data: &[DomainData], cfg: &TrainConfig, dim: usize) -> SpdNetModel {
        let mut subjects: Vec<SubjectId> = data.iter().flat_map(|d| d.subjects.clone()).collect();
        subjects.sort_unstable();
        subjects.dedup();
        let domains: Vec<(DomainId, usize)> = data.iter().map(|d| (d.domain, 3)).collect();
        SpdNetModel::new(dim, &subjects, &domains, cfg).unwrap()
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            target_batch: 6,
            source_batch: 12,
            trunk_widths: (6, 4),
            fc_widths: (16, 8),
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = toy_data(60, 6, 2);
        let cfg = small_cfg(11);
        let mut m1 = toy_model(&data, &cfg, 6);
        let mut m2 = toy_model(&data, &cfg, 6);
        let log1 = train(&mut m1, &data, &cfg).unwrap();
        let log2 = train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(m1.fc1.w, m2.fc1.w);
        assert_eq!(m1.bimap1.weight(), m2.bimap1.weight());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = toy_data(61, 6, 2);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..small_cfg(12)
        };
        let mut model = toy_model(&data, &cfg, 6);
        let before = model.clone();
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.fc1.w, before.fc1.w);
        assert_eq!(model.fc2.w, before.fc2.w);
        assert_eq!(model.bimap1.weight(), before.bimap1.weight());
        assert_eq!(model.bimap2.weight(), before.bimap2.weight());
        for (s, f) in &model.fronts {
            assert_eq!(f.weight(), before.fronts[s].weight());
        }
        assert_eq!(model.rbn1.bias().matrix(), before.rbn1.bias().matrix());
        for (d, h) in &model.heads {
            assert_eq!(h.w, before.heads[d].w);
        }
        // Running statistics are buffers, not parameters; they do move.
        assert_ne!(
            model.rbn1.running_mean().matrix(),
            before.rbn1.running_mean().matrix()
        );
    }

    #[test]
    fn zero_weighted_domain_leaves_its_head_frozen() {
        let data = toy_data(62, 6, 2);
        let mut cfg = small_cfg(13);
        cfg.loss_weights.insert(DomainId(1), 0.0);
        let mut model = toy_model(&data, &cfg, 6);
        let before_head1 = model.heads[&DomainId(1)].w.clone();
        let before_head0 = model.heads[&DomainId(0)].w.clone();
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.heads[&DomainId(1)].w, before_head1);
        assert_ne!(model.heads[&DomainId(0)].w, before_head0);
    }

    #[test]
    fn stiefel_constraint_holds_during_training() {
        let data = toy_data(63, 6, 2);
        let cfg = small_cfg(14);
        let mut model = toy_model(&data, &cfg, 6);
        train(&mut model, &data, &cfg).unwrap();
        assert!(model.max_stiefel_error() <= super::super::STIEFEL_TOL);
    }

    #[test]
    fn training_separable_data_reaches_high_accuracy() {
        let data = toy_data(64, 8, 2);
        let cfg = TrainConfig {
            epochs: 20,
            target_batch: 8,
            source_batch: 16,
            trunk_widths: (8, 6),
            fc_widths: (24, 12),
            seed: 15,
            ..TrainConfig::default()
        };
        let mut model = toy_model(&data, &cfg, 8);
        train(&mut model, &data, &cfg).unwrap();
        let acc = training_balanced_accuracy(&model, &data).unwrap();
        assert!(acc >= 0.90, "training balanced accuracy {acc}");
    }

    #[test]
    fn empty_domain_is_rejected() {
        let data = vec![DomainData {
            domain: DomainId(0),
            role: DomainRole::Source,
            covs: vec![],
            subjects: vec![],
            labels: vec![],
        }];
        let cfg = small_cfg(16);
        let mut model = SpdNetModel::new(
            4,
            &[SubjectId(0)],
            &[(DomainId(0), 2)],
            &cfg,
        )
        .unwrap();
        assert!(matches!(
            train(&mut model, &data, &cfg),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn unknown_training_subject_is_rejected() {
        let mut data = toy_data(65, 6, 1);
        data[0].subjects[0] = SubjectId(777);
        let cfg = small_cfg(17);
        let mut model = toy_model(&toy_data(65, 6, 1), &cfg, 6);
        assert!(matches!(
            train(&mut model, &data, &cfg),
            Err(Error::UnknownSubject(777))
        ));
    }

    #[test]
    fn loss_curve_has_one_record_per_domain_per_step() {
        let data = toy_data(66, 6, 2);
        let cfg = small_cfg(18);
        let mut model = toy_model(&data, &cfg, 6);
        let log = train(&mut model, &data, &cfg).unwrap();
        // source: 48 trials / batch 12 = 4 passes; target: 48 / 6 = 8 passes.
        let steps_per_epoch = 8;
        assert_eq!(log.records.len(), cfg.epochs * steps_per_epoch * 2);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,step,domain,loss\n"));
        assert_eq!(text.lines().count(), 1 + log.records.len());
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(42, 1, 0);
        let b = derive_seed(42, 1, 1);
        let c = derive_seed(42, 2, 0);
        let d = derive_seed(43, 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
