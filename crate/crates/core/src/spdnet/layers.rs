//! Network layers with hand-written reverse passes.
//!
//! Every `backward` here returns gradients of a scalar loss given the
//! upstream gradient of that loss with respect to the layer output; the
//! gradient suite checks each one against central finite differences.

use super::karcher::{karcher_mean_taped, karcher_vjp, KarcherTape};
use crate::classify::{sym_to_vector, vector_to_sym};
use crate::error::{Error, Result};
use crate::spd::{
    eig_fn_backward, eig_sym, exp_map, geodesic, sym_part, SpdMatrix, TangentVector,
    DEFAULT_KARCHER_MAX_ITER, DEFAULT_KARCHER_TOL,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Tightest semi-orthogonality violation tolerated on a BiMap weight.
pub const STIEFEL_TOL: f64 = 1e-8;

/// Bilinear layer `X -> W' X W` with semi-orthogonal `W` (d_in x d_out,
/// `W'W = I`). Keeps SPD inputs SPD because `W` has full column rank.
#[derive(Debug, Clone)]
pub struct BiMapLayer {
    w: DMatrix<f64>,
}

impl BiMapLayer {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() > w.nrows() {
            return Err(Error::InvalidArgument(format!(
                "BiMap weight must have d_out <= d_in, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let layer = BiMapLayer { w };
        let err = layer.stiefel_error();
        if err > STIEFEL_TOL {
            return Err(Error::InvalidArgument(format!(
                "BiMap weight is not semi-orthogonal: |W'W - I| = {err:.3e}"
            )));
        }
        Ok(layer)
    }

    /// Random point on the Stiefel manifold: Q factor of a Gaussian matrix.
    pub fn random_init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let q = crate::spd::sampling::random_orthogonal(rng, d_in);
        BiMapLayer {
            w: q.columns(0, d_out).into_owned(),
        }
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    /// `|W'W - I|_F`.
    pub fn stiefel_error(&self) -> f64 {
        let gram = self.w.transpose() * &self.w;
        (gram - DMatrix::identity(self.d_out(), self.d_out())).norm()
    }

    pub fn forward(&self, x: &SpdMatrix) -> Result<SpdMatrix> {
        if x.dim() != self.d_in() {
            return Err(Error::DimensionMismatch {
                op: "bimap_forward",
                expected: self.d_in(),
                found: x.dim(),
            });
        }
        Ok(SpdMatrix::from_trusted(
            self.w.transpose() * x.matrix() * &self.w,
        ))
    }

    /// Gradients of `<upstream, W' X W>`: with `U = sym(upstream)`,
    /// `dX = W U W'` and `dW = 2 X W U`.
    pub fn backward(
        &self,
        x: &SpdMatrix,
        upstream: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if upstream.nrows() != self.d_out() {
            return Err(Error::DimensionMismatch {
                op: "bimap_backward",
                expected: self.d_out(),
                found: upstream.nrows(),
            });
        }
        let u = sym_part(upstream);
        let dx = &self.w * &u * self.w.transpose();
        let dw = x.matrix() * &self.w * &u * 2.0;
        Ok((dx, dw))
    }

    /// Projects a Euclidean gradient to the Stiefel tangent space at `W`,
    /// steps, and retracts with a sign-fixed QR factorization. A zero step
    /// leaves the weight bit-identical.
    pub fn retract_step(&mut self, euclidean_grad: &DMatrix<f64>, lr: f64) {
        let wtg = self.w.transpose() * euclidean_grad;
        let tangent = euclidean_grad - &self.w * sym_part(&wtg);
        let step = tangent * lr;
        if step.norm() == 0.0 {
            return;
        }
        let qr = (&self.w - step).qr();
        let r = qr.r();
        let mut q = qr.q().columns(0, self.d_out()).into_owned();
        for j in 0..self.d_out() {
            if r[(j, j)] < 0.0 {
                for i in 0..self.d_in() {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        self.w = q;
        debug_assert!(self.stiefel_error() <= STIEFEL_TOL);
    }
}

/// Eigenvalue rectification: clamps the spectrum to at least `eps`.
#[derive(Debug, Clone, Copy)]
pub struct ReEigLayer {
    pub eps: f64,
}

pub const DEFAULT_REEIG_EPS: f64 = 1e-4;

impl ReEigLayer {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ReEig floor must be positive, got {eps}"
            )));
        }
        Ok(ReEigLayer { eps })
    }

    pub fn forward(&self, x: &SpdMatrix) -> Result<SpdMatrix> {
        let eig = eig_sym(x.matrix())?;
        Ok(SpdMatrix::from_trusted(
            eig.map_eigenvalues(|l| l.max(self.eps)),
        ))
    }

    /// Subgradient 0 for eigenvalues at or below the floor.
    pub fn backward(&self, x: &SpdMatrix, upstream: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let eps = self.eps;
        eig_fn_backward(
            x.matrix(),
            |l| l.max(eps),
            |l| if l > eps { 1.0 } else { 0.0 },
            upstream,
        )
    }
}

/// Matrix log followed by the norm-preserving upper-triangular vectorization,
/// mapping the manifold into flat feature space.
pub fn logeig_forward(x: &SpdMatrix) -> Result<DVector<f64>> {
    Ok(sym_to_vector(&x.log()?))
}

pub fn logeig_backward(x: &SpdMatrix, upstream: &DVector<f64>) -> Result<DMatrix<f64>> {
    // The vectorization is an isometry, so its adjoint is its inverse.
    let g = vector_to_sym(upstream, x.dim())?;
    eig_fn_backward(x.matrix(), f64::ln, |l| 1.0 / l, &g)
}

/// Riemannian batch normalization: center the batch at its Karcher mean,
/// re-bias by a learnable SPD matrix, and keep a geodesic running mean for
/// evaluation.
#[derive(Debug, Clone)]
pub struct RbnLayer {
    bias: SpdMatrix,
    running_mean: SpdMatrix,
    momentum: f64,
}

pub const DEFAULT_RBN_MOMENTUM: f64 = 0.9;

/// Activations one RBN training step needs for its reverse pass.
pub struct RbnCache {
    tape: KarcherTape,
    batch_mean: SpdMatrix,
    mean_invsqrt: DMatrix<f64>,
    bias_sqrt: DMatrix<f64>,
    centered: Vec<DMatrix<f64>>,
}

impl RbnCache {
    pub fn batch_mean(&self) -> &SpdMatrix {
        &self.batch_mean
    }
}

impl RbnLayer {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "RBN momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(RbnLayer {
            bias: SpdMatrix::identity(dim),
            running_mean: SpdMatrix::identity(dim),
            momentum,
        })
    }

    pub fn dim(&self) -> usize {
        self.bias.dim()
    }

    pub fn bias(&self) -> &SpdMatrix {
        &self.bias
    }

    pub fn running_mean(&self) -> &SpdMatrix {
        &self.running_mean
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub(crate) fn set_state(&mut self, bias: SpdMatrix, running_mean: SpdMatrix) {
        self.bias = bias;
        self.running_mean = running_mean;
    }

    /// Training-mode forward: statistics from the batch itself.
    /// `X -> G^{1/2} M^{-1/2} X M^{-1/2} G^{1/2}` with `M` the batch Karcher
    /// mean. Pure; the running mean moves only in [`Self::update_running_mean`].
    pub fn forward_train(&self, batch: &[SpdMatrix]) -> Result<(Vec<SpdMatrix>, RbnCache)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("rbn_forward"));
        }
        let weights = vec![1.0 / batch.len() as f64; batch.len()];
        let (mean, tape) =
            karcher_mean_taped(batch, &weights, DEFAULT_KARCHER_MAX_ITER, DEFAULT_KARCHER_TOL)?;
        let mis = mean.invsqrt()?.into_matrix();
        let gs = self.bias.sqrt()?.into_matrix();
        let mut centered = Vec::with_capacity(batch.len());
        let mut out = Vec::with_capacity(batch.len());
        for x in batch {
            let c = sym_part(&(&mis * x.matrix() * &mis));
            out.push(SpdMatrix::from_trusted(&gs * &c * &gs));
            centered.push(c);
        }
        Ok((
            out,
            RbnCache {
                tape,
                batch_mean: mean,
                mean_invsqrt: mis,
                bias_sqrt: gs,
                centered,
            },
        ))
    }

    /// Evaluation-mode forward: the running mean replaces the batch mean.
    pub fn forward_eval(&self, x: &SpdMatrix) -> Result<SpdMatrix> {
        let mis = self.running_mean.invsqrt()?;
        let gs = self.bias.sqrt()?;
        let c = mis.matrix() * x.matrix() * mis.matrix();
        Ok(SpdMatrix::from_trusted(gs.matrix() * c * gs.matrix()))
    }

    /// Geodesic step of the running mean toward the latest batch mean.
    pub fn update_running_mean(&mut self, cache: &RbnCache) -> Result<()> {
        self.running_mean = geodesic(&self.running_mean, &cache.batch_mean, self.momentum)?;
        Ok(())
    }

    /// Gradients with respect to every batch entry (through the Karcher mean)
    /// and the Euclidean gradient with respect to the bias `G`.
    pub fn backward(
        &self,
        batch: &[SpdMatrix],
        cache: &RbnCache,
        upstream: &[DMatrix<f64>],
    ) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
        if upstream.len() != batch.len() {
            return Err(Error::LengthMismatch {
                op: "rbn_backward",
                left: batch.len(),
                right: upstream.len(),
            });
        }
        let dim = self.dim();
        let gs = &cache.bias_sqrt;
        let mis = &cache.mean_invsqrt;

        let mut d_gs = DMatrix::zeros(dim, dim);
        let mut d_mis = DMatrix::zeros(dim, dim);
        let mut d_batch: Vec<DMatrix<f64>> = Vec::with_capacity(batch.len());
        for ((x, c), u) in batch.iter().zip(&cache.centered).zip(upstream) {
            let u = sym_part(u);
            // out = gs * c * gs
            d_gs += &u * gs * c + c * gs * &u;
            let d_c = gs * &u * gs;
            // c = mis * x * mis
            d_mis += &d_c * mis * x.matrix() + x.matrix() * mis * &d_c;
            d_batch.push(mis * &d_c * mis);
        }

        let d_bias = eig_fn_backward(
            self.bias.matrix(),
            f64::sqrt,
            |l| 0.5 / l.sqrt(),
            &d_gs,
        )?;
        let d_mean = eig_fn_backward(
            cache.batch_mean.matrix(),
            |l| 1.0 / l.sqrt(),
            |l| -0.5 * l.powf(-1.5),
            &d_mis,
        )?;
        let through_mean = karcher_vjp(&cache.tape, batch, &d_mean)?;
        for (dx, dm) in d_batch.iter_mut().zip(through_mean) {
            *dx += dm;
            *dx = sym_part(dx);
        }
        Ok((d_batch, d_bias))
    }

    /// Retraction step for the bias: exponential map at `G` of the projected
    /// (symmetrized) gradient. A zero step leaves the bias bit-identical.
    pub fn retract_bias(&mut self, euclidean_grad: &DMatrix<f64>, lr: f64) -> Result<()> {
        let step = sym_part(euclidean_grad) * (-lr);
        if step.norm() == 0.0 {
            return Ok(());
        }
        let tangent = TangentVector::from_trusted(self.bias.clone(), step);
        self.bias = exp_map(&self.bias, &tangent)?;
        Ok(())
    }
}

/// Permutation-equivariant set layer: embeds the set by the mean of a linear
/// map of its members and lets a second linear map update each member from
/// its own features plus the set embedding.
#[derive(Debug, Clone)]
pub struct DeepSetAlignLayer {
    pub gamma_w: DMatrix<f64>,  // embed x feat
    pub gamma_b: DVector<f64>,  // embed
    pub lambda_w: DMatrix<f64>, // feat x (feat + embed)
    pub lambda_b: DVector<f64>, // feat
}

pub struct DeepSetCache {
    inputs: Vec<DVector<f64>>,
    mean_embed: DVector<f64>,
}

pub struct DeepSetGrads {
    pub gamma_w: DMatrix<f64>,
    pub gamma_b: DVector<f64>,
    pub lambda_w: DMatrix<f64>,
    pub lambda_b: DVector<f64>,
}

impl DeepSetAlignLayer {
    pub fn feat_dim(&self) -> usize {
        self.lambda_b.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.gamma_b.len()
    }

    /// The configuration that forwards every member unchanged: the update map
    /// keeps the feature block and drops the embedding block.
    pub fn identity(feat_dim: usize, embed_dim: usize) -> Self {
        let mut lambda_w = DMatrix::zeros(feat_dim, feat_dim + embed_dim);
        for i in 0..feat_dim {
            lambda_w[(i, i)] = 1.0;
        }
        DeepSetAlignLayer {
            gamma_w: DMatrix::zeros(embed_dim, feat_dim),
            gamma_b: DVector::zeros(embed_dim),
            lambda_w,
            lambda_b: DVector::zeros(feat_dim),
        }
    }

    /// Identity configuration plus a small random embedding path, so training
    /// starts from the plain pipeline and learns the set update.
    pub fn near_identity_init(rng: &mut impl Rng, feat_dim: usize, embed_dim: usize) -> Self {
        let mut layer = Self::identity(feat_dim, embed_dim);
        let scale = (1.0 / feat_dim as f64).sqrt() * 0.1;
        layer.gamma_w =
            crate::spd::sampling::random_gaussian(rng, embed_dim, feat_dim) * scale;
        layer
    }

    /// Updates the whole set of one subject's trial features.
    pub fn forward(&self, set: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, DeepSetCache)> {
        if set.is_empty() {
            return Err(Error::EmptyInput("deepset_forward"));
        }
        let feat = self.feat_dim();
        for z in set {
            if z.len() != feat {
                return Err(Error::DimensionMismatch {
                    op: "deepset_forward",
                    expected: feat,
                    found: z.len(),
                });
            }
        }
        let n = set.len() as f64;
        let mut mean_embed = DVector::zeros(self.embed_dim());
        for z in set {
            mean_embed += &self.gamma_w * z + &self.gamma_b;
        }
        mean_embed /= n;
        let outputs = set
            .iter()
            .map(|z| {
                let joined = join(z, &mean_embed);
                &self.lambda_w * joined + &self.lambda_b
            })
            .collect();
        Ok((
            outputs,
            DeepSetCache {
                inputs: set.to_vec(),
                mean_embed,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &DeepSetCache,
        upstream: &[DVector<f64>],
    ) -> Result<(Vec<DVector<f64>>, DeepSetGrads)> {
        let n = cache.inputs.len();
        if upstream.len() != n {
            return Err(Error::LengthMismatch {
                op: "deepset_backward",
                left: n,
                right: upstream.len(),
            });
        }
        let feat = self.feat_dim();
        let embed = self.embed_dim();
        let lw_feat = self.lambda_w.columns(0, feat);
        let lw_embed = self.lambda_w.columns(feat, embed);

        let mut grads = DeepSetGrads {
            gamma_w: DMatrix::zeros(embed, feat),
            gamma_b: DVector::zeros(embed),
            lambda_w: DMatrix::zeros(feat, feat + embed),
            lambda_b: DVector::zeros(feat),
        };
        let mut d_mean = DVector::zeros(embed);
        let mut d_inputs: Vec<DVector<f64>> = Vec::with_capacity(n);
        for (z, u) in cache.inputs.iter().zip(upstream) {
            let joined = join(z, &cache.mean_embed);
            grads.lambda_w += u * joined.transpose();
            grads.lambda_b += u;
            d_mean += lw_embed.transpose() * u;
            d_inputs.push(lw_feat.transpose() * u);
        }
        // Through the mean embedding: each member contributed gamma(z)/n.
        let share = &d_mean / n as f64;
        for (z, dz) in cache.inputs.iter().zip(d_inputs.iter_mut()) {
            grads.gamma_w += &share * z.transpose();
            *dz += self.gamma_w.transpose() * &share;
        }
        grads.gamma_b = d_mean;
        Ok((d_inputs, grads))
    }
}

fn join(z: &DVector<f64>, m: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(z.len() + m.len());
    out.rows_mut(0, z.len()).copy_from(z);
    out.rows_mut(z.len(), m.len()).copy_from(m);
    out
}

/// Plain affine layer; the fully connected trunk and the per-domain heads.
#[derive(Debug, Clone)]
pub struct FcLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub struct FcGrads {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl FcLayer {
    pub fn random_init(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        FcLayer {
            w: crate::spd::sampling::random_gaussian(rng, out_dim, in_dim) * scale,
            b: DVector::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.w.ncols() {
            return Err(Error::DimensionMismatch {
                op: "fc_forward",
                expected: self.w.ncols(),
                found: x.len(),
            });
        }
        Ok(&self.w * x + &self.b)
    }

    pub fn backward(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> (DVector<f64>, FcGrads) {
        let dx = self.w.transpose() * upstream;
        (
            dx,
            FcGrads {
                w: upstream * x.transpose(),
                b: upstream.clone(),
            },
        )
    }
}

pub fn relu(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(pre.len(), |i, _| {
        if pre[i] > 0.0 {
            upstream[i]
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::{frechet_mean_uniform, sampling};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn fd_sym_input_grad(
        loss: impl Fn(&SpdMatrix) -> f64,
        x: &SpdMatrix,
        h: f64,
    ) -> DMatrix<f64> {
        let n = x.dim();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut plus = x.matrix().clone();
                let mut minus = x.matrix().clone();
                plus[(i, j)] += 0.5 * h;
                plus[(j, i)] += 0.5 * h;
                minus[(i, j)] -= 0.5 * h;
                minus[(j, i)] -= 0.5 * h;
                g[(i, j)] = (loss(&SpdMatrix::from_trusted(plus))
                    - loss(&SpdMatrix::from_trusted(minus)))
                    / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn bimap_identity_weight_selects_leading_block() {
        let mut rng = ChaCha20Rng::seed_from_u64(30);
        let x = sampling::random_spd(&mut rng, 5, (0.5, 2.0));
        let mut w = DMatrix::zeros(5, 3);
        for i in 0..3 {
            w[(i, i)] = 1.0;
        }
        let layer = BiMapLayer::new(w).unwrap();
        let y = layer.forward(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(y.matrix()[(i, j)], x.matrix()[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bimap_preserves_identity_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let layer = BiMapLayer::random_init(&mut rng, 6, 4);
        let y = layer.forward(&SpdMatrix::identity(6)).unwrap();
        assert!((y.matrix() - DMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn bimap_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let layer = BiMapLayer::random_init(&mut rng, 5, 3);
        let x = sampling::random_spd(&mut rng, 5, (0.5, 2.0));
        let probe = sampling::random_symmetric(&mut rng, 3, 0.8);
        let (dx, dw) = layer.backward(&x, &probe).unwrap();

        let loss_x =
            |m: &SpdMatrix| (sym_part(&probe).transpose() * layer.forward(m).unwrap().matrix()).trace();
        let fd_x = fd_sym_input_grad(loss_x, &x, 1e-5);
        assert!((&dx - &fd_x).norm() / fd_x.norm() < 1e-6);

        let h = 1e-6;
        let mut fd_w = DMatrix::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                let mut wp = layer.weight().clone();
                let mut wm = layer.weight().clone();
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                let lp = (sym_part(&probe).transpose() * (wp.transpose() * x.matrix() * &wp)).trace();
                let lm = (sym_part(&probe).transpose() * (wm.transpose() * x.matrix() * &wm)).trace();
                fd_w[(i, j)] = (lp - lm) / (2.0 * h);
            }
        }
        assert!((&dw - &fd_w).norm() / fd_w.norm() < 1e-6);
    }

    #[test]
    fn stiefel_retraction_stays_on_manifold() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let mut layer = BiMapLayer::random_init(&mut rng, 8, 5);
        for _ in 0..50 {
            let g = sampling::random_gaussian(&mut rng, 8, 5);
            layer.retract_step(&g, 0.05);
            assert!(layer.stiefel_error() <= STIEFEL_TOL);
        }
    }

    #[test]
    fn zero_step_is_bit_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let mut layer = BiMapLayer::random_init(&mut rng, 6, 3);
        let before = layer.weight().clone();
        layer.retract_step(&DMatrix::zeros(6, 3), 0.1);
        let g = sampling::random_gaussian(&mut rng, 6, 3);
        layer.retract_step(&g, 0.0);
        assert_eq!(layer.weight(), &before);
    }

    #[test]
    fn reeig_floors_small_eigenvalues_only() {
        let layer = ReEigLayer::new(1e-4).unwrap();
        let x = SpdMatrix::from_diagonal(&[2.0, 1e-6]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_relative_eq!(y.matrix()[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(y.matrix()[(1, 1)], 1e-4, epsilon = 1e-16);

        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let big = sampling::random_spd(&mut rng, 4, (0.5, 2.0));
        let unchanged = layer.forward(&big).unwrap();
        assert!((unchanged.matrix() - big.matrix()).norm() < 1e-10);
    }

    #[test]
    fn reeig_gradient_matches_fd_away_from_kink() {
        let mut rng = ChaCha20Rng::seed_from_u64(36);
        let layer = ReEigLayer::new(1e-4).unwrap();
        let x = sampling::random_spd(&mut rng, 5, (0.5, 2.0));
        let probe = sampling::random_symmetric(&mut rng, 5, 0.7);
        let g = layer.backward(&x, &probe).unwrap();
        let loss =
            |m: &SpdMatrix| (sym_part(&probe).transpose() * layer.forward(m).unwrap().matrix()).trace();
        let fd = fd_sym_input_grad(loss, &x, 1e-5);
        assert!((&g - &fd).norm() / fd.norm() < 1e-6);
    }

    #[test]
    fn logeig_of_identity_is_zero_and_diagonal_case() {
        let z = logeig_forward(&SpdMatrix::identity(3)).unwrap();
        assert!(z.norm() < 1e-12);
        let x = SpdMatrix::from_diagonal(&[std::f64::consts::E, 1.0]).unwrap();
        let v = logeig_forward(&x).unwrap();
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn logeig_gradient_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let x = sampling::random_spd(&mut rng, 4, (0.5, 2.0));
        let probe = DVector::from_fn(10, |i, _| 0.1 * (i as f64 + 1.0));
        let g = logeig_backward(&x, &probe).unwrap();
        let loss = |m: &SpdMatrix| probe.dot(&logeig_forward(m).unwrap());
        let fd = fd_sym_input_grad(loss, &x, 1e-5);
        assert!((&g - &fd).norm() / fd.norm() < 1e-6);
    }

    #[test]
    fn rbn_identical_batch_with_identity_bias_outputs_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(38);
        let a = sampling::random_spd(&mut rng, 4, (0.5, 2.0));
        let layer = RbnLayer::new(4, 0.9).unwrap();
        let (out, _) = layer.forward_train(&[a.clone(), a.clone(), a]).unwrap();
        for y in out {
            assert!((y.matrix() - DMatrix::identity(4, 4)).norm() < 1e-8);
        }
    }

    #[test]
    fn rbn_centers_batches_at_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(39);
        let batch: Vec<SpdMatrix> = (0..5)
            .map(|_| sampling::random_spd(&mut rng, 4, (0.4, 2.5)))
            .collect();
        let layer = RbnLayer::new(4, 0.9).unwrap();
        let (out, _) = layer.forward_train(&batch).unwrap();
        let mean = frechet_mean_uniform(&out).unwrap();
        let dev = (mean.matrix() - DMatrix::identity(4, 4)).norm();
        assert!(dev < 1e-6, "post-centering mean off identity by {dev}");
    }

    #[test]
    fn rbn_batch_with_identity_mean_passes_through_under_identity_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        // Build a two-element batch {A, A^{-1}} whose Karcher mean is I.
        let a = sampling::random_spd(&mut rng, 3, (0.5, 2.0));
        let batch = vec![a.clone(), a.inverse().unwrap()];
        let layer = RbnLayer::new(3, 0.9).unwrap();
        let (out, cache) = layer.forward_train(&batch).unwrap();
        assert!((cache.batch_mean().matrix() - DMatrix::identity(3, 3)).norm() < 1e-8);
        for (y, x) in out.iter().zip(&batch) {
            assert!((y.matrix() - x.matrix()).norm() < 1e-7);
        }
    }

    #[test]
    fn rbn_running_mean_follows_geodesic() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let batch: Vec<SpdMatrix> = (0..3)
            .map(|_| sampling::random_spd(&mut rng, 3, (0.5, 2.0)))
            .collect();
        let mut layer = RbnLayer::new(3, 0.9).unwrap();
        let (_, cache) = layer.forward_train(&batch).unwrap();
        layer.update_running_mean(&cache).unwrap();
        let expected =
            geodesic(&SpdMatrix::identity(3), cache.batch_mean(), 0.9).unwrap();
        assert!((layer.running_mean().matrix() - expected.matrix()).norm() < 1e-12);
    }

    #[test]
    fn rbn_gradients_match_fd_through_the_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let dim = 4;
        let batch: Vec<SpdMatrix> = (0..3)
            .map(|_| sampling::random_spd(&mut rng, dim, (0.5, 2.0)))
            .collect();
        let mut layer = RbnLayer::new(dim, 0.9).unwrap();
        // A non-trivial bias makes the dG path worth checking.
        layer.set_state(
            sampling::random_spd(&mut rng, dim, (0.6, 1.8)),
            SpdMatrix::identity(dim),
        );
        let probes: Vec<DMatrix<f64>> = (0..3)
            .map(|_| sampling::random_symmetric(&mut rng, dim, 0.6))
            .collect();

        let (_, cache) = layer.forward_train(&batch).unwrap();
        let (d_batch, d_bias) = layer.backward(&batch, &cache, &probes).unwrap();

        let loss = |b: &[SpdMatrix], l: &RbnLayer| -> f64 {
            let (out, _) = l.forward_train(b).unwrap();
            out.iter()
                .zip(&probes)
                .map(|(y, p)| (sym_part(p).transpose() * y.matrix()).trace())
                .sum()
        };
        let h = 1e-5;
        for t in 0..batch.len() {
            let mut fd = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    let mut bp = batch.to_vec();
                    let mut bm = batch.to_vec();
                    let mut mp = bp[t].matrix().clone();
                    let mut mm = bm[t].matrix().clone();
                    mp[(i, j)] += 0.5 * h;
                    mp[(j, i)] += 0.5 * h;
                    mm[(i, j)] -= 0.5 * h;
                    mm[(j, i)] -= 0.5 * h;
                    bp[t] = SpdMatrix::from_trusted(mp);
                    bm[t] = SpdMatrix::from_trusted(mm);
                    fd[(i, j)] = (loss(&bp, &layer) - loss(&bm, &layer)) / (2.0 * h);
                }
            }
            let rel = (&d_batch[t] - &fd).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-4, "batch entry {t}: rel error {rel}");
        }
        // Bias gradient via symmetric perturbations of G.
        let mut fd_g = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                let mut gp = layer.bias().matrix().clone();
                let mut gm = layer.bias().matrix().clone();
                gp[(i, j)] += 0.5 * h;
                gp[(j, i)] += 0.5 * h;
                gm[(i, j)] -= 0.5 * h;
                gm[(j, i)] -= 0.5 * h;
                lp.set_state(SpdMatrix::from_trusted(gp), SpdMatrix::identity(dim));
                lm.set_state(SpdMatrix::from_trusted(gm), SpdMatrix::identity(dim));
                fd_g[(i, j)] = (loss(&batch, &lp) - loss(&batch, &lm)) / (2.0 * h);
            }
        }
        let rel = (&d_bias - &fd_g).norm() / fd_g.norm().max(1e-12);
        assert!(rel < 1e-4, "bias gradient rel error {rel}");
    }

    #[test]
    fn deepset_identity_configuration_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let mut layer = DeepSetAlignLayer::identity(4, 3);
        // Arbitrary gamma must not matter when lambda drops the embedding.
        layer.gamma_w = sampling::random_gaussian(&mut rng, 3, 4);
        layer.gamma_b = DVector::from_fn(3, |i, _| i as f64);
        let set: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let (out, _) = layer.forward(&set).unwrap();
        for (o, z) in out.iter().zip(&set) {
            assert!((o - z).norm() < 1e-14);
        }
    }

    #[test]
    fn deepset_is_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let layer = DeepSetAlignLayer::near_identity_init(&mut rng, 4, 3);
        let set: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<DVector<f64>> = perm.iter().map(|&i| set[i].clone()).collect();
        let (out, _) = layer.forward(&set).unwrap();
        let (out_p, _) = layer.forward(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((&out_p[k] - &out[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn deepset_gradients_match_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let mut layer = DeepSetAlignLayer::near_identity_init(&mut rng, 3, 2);
        layer.lambda_w += sampling::random_gaussian(&mut rng, 3, 5) * 0.3;
        let set: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let probes: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let (_, cache) = layer.forward(&set).unwrap();
        let (d_inputs, grads) = layer.backward(&cache, &probes).unwrap();

        let loss = |l: &DeepSetAlignLayer, s: &[DVector<f64>]| -> f64 {
            let (out, _) = l.forward(s).unwrap();
            out.iter().zip(&probes).map(|(o, p)| o.dot(p)).sum()
        };
        let h = 1e-6;
        // Inputs.
        for t in 0..set.len() {
            for k in 0..3 {
                let mut sp = set.to_vec();
                let mut sm = set.to_vec();
                sp[t][k] += h;
                sm[t][k] -= h;
                let fd = (loss(&layer, &sp) - loss(&layer, &sm)) / (2.0 * h);
                assert!(
                    (d_inputs[t][k] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                    "input grad mismatch at ({t},{k})"
                );
            }
        }
        // Gamma weights exercise the path through the mean.
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.gamma_w[(i, j)] += h;
                lm.gamma_w[(i, j)] -= h;
                let fd = (loss(&lp, &set) - loss(&lm, &set)) / (2.0 * h);
                assert!(
                    (grads.gamma_w[(i, j)] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                    "gamma grad mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn fc_backward_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let layer = FcLayer::random_init(&mut rng, 4, 3);
        let x = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let probe = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (dx, grads) = layer.backward(&x, &probe);
        let h = 1e-6;
        for k in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (layer.forward(&xp).unwrap().dot(&probe)
                - layer.forward(&xm).unwrap().dot(&probe))
                / (2.0 * h);
            assert!((dx[k] - fd).abs() < 1e-8);
        }
        for i in 0..3 {
            for j in 0..4 {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.w[(i, j)] += h;
                lm.w[(i, j)] -= h;
                let fd = (lp.forward(&x).unwrap().dot(&probe)
                    - lm.forward(&x).unwrap().dot(&probe))
                    / (2.0 * h);
                assert!((grads.w[(i, j)] - fd).abs() < 1e-8);
            }
        }
    }
}
