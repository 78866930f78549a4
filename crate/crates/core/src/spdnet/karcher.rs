//! Karcher mean with a recorded computation tape, so batch normalization can
//! backpropagate exactly through the mean.
//!
//! The forward pass mirrors [`crate::spd::frechet_mean`] step for step (a
//! test asserts the two agree); the reverse pass walks the unrolled fixed
//! point iteration applying the Daleckii-Krein derivative at every spectral
//! function.

use crate::error::{Error, Result};
use crate::spd::{eig_fn_backward, sym_apply, sym_part, SpdMatrix, SpectralFn};
use nalgebra::DMatrix;

/// Everything one iteration `g -> g^{1/2} exp(sum_i w_i log(g^{-1/2} X_i g^{-1/2})) g^{1/2}`
/// needs for its reverse pass.
struct IterationTape {
    g: DMatrix<f64>,
    g_sqrt: DMatrix<f64>,
    g_invsqrt: DMatrix<f64>,
    /// Whitened batch entries `g^{-1/2} X_i g^{-1/2}`.
    whitened: Vec<DMatrix<f64>>,
    /// Mean of the whitened logs.
    step: DMatrix<f64>,
}

pub struct KarcherTape {
    iterations: Vec<IterationTape>,
    weights: Vec<f64>,
    dim: usize,
}

impl KarcherTape {
    pub fn iterations(&self) -> usize {
        self.iterations.len()
    }
}

/// Karcher mean recording every iteration. Same algorithm and convergence
/// rule as `frechet_mean`: start at the weighted arithmetic mean, update with
/// unit step, stop when the tangent update norm falls below `tol`.
pub fn karcher_mean_taped(
    mats: &[SpdMatrix],
    weights: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(SpdMatrix, KarcherTape)> {
    if mats.is_empty() {
        return Err(Error::EmptyInput("karcher_mean_taped"));
    }
    if mats.len() != weights.len() {
        return Err(Error::LengthMismatch {
            op: "karcher_mean_taped",
            left: mats.len(),
            right: weights.len(),
        });
    }
    let dim = mats[0].dim();

    let mut acc = DMatrix::zeros(dim, dim);
    for (m, &w) in mats.iter().zip(weights) {
        acc += m.matrix() * w;
    }
    let mut g = SpdMatrix::from_trusted(acc);

    let mut tape = KarcherTape {
        iterations: Vec::new(),
        weights: weights.to_vec(),
        dim,
    };

    let mut residual = f64::INFINITY;
    for _ in 0..=max_iter {
        let gs = g.sqrt()?;
        let gis = g.invsqrt()?;
        let mut whitened = Vec::with_capacity(mats.len());
        let mut step = DMatrix::zeros(dim, dim);
        for (m, &w) in mats.iter().zip(weights) {
            let a = sym_part(&(gis.matrix() * m.matrix() * gis.matrix()));
            step += sym_apply(&a, SpectralFn::Log)? * w;
            whitened.push(a);
        }
        residual = (gs.matrix() * &step * gs.matrix()).norm();
        if residual <= tol {
            return Ok((g, tape));
        }
        if tape.iterations.len() == max_iter {
            break;
        }
        let exp_step = sym_apply(&step, SpectralFn::Exp)?;
        let next = SpdMatrix::from_trusted(gs.matrix() * exp_step * gs.matrix());
        tape.iterations.push(IterationTape {
            g: g.matrix().clone(),
            g_sqrt: gs.into_matrix(),
            g_invsqrt: gis.into_matrix(),
            whitened,
            step,
        });
        g = next;
    }
    Err(Error::KarcherDidNotConverge {
        max_iter,
        residual,
        tol,
    })
}

/// Pulls a gradient with respect to the mean back onto the batch entries.
///
/// `mats` must be the batch the tape was recorded on.
pub fn karcher_vjp(
    tape: &KarcherTape,
    mats: &[SpdMatrix],
    upstream: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let dim = tape.dim;
    let n = mats.len();
    let mut d_mats = vec![DMatrix::zeros(dim, dim); n];
    let mut d_g = sym_part(upstream);

    for it in tape.iterations.iter().rev() {
        let gs = &it.g_sqrt;
        let gis = &it.g_invsqrt;
        // g_next = gs * exp(step) * gs
        let exp_step = sym_apply(&it.step, SpectralFn::Exp)?;
        let d_gs_from_out = &d_g * gs * &exp_step + &exp_step * gs * &d_g;
        let d_exp = gs * &d_g * gs;
        let d_step = eig_fn_backward(&it.step, f64::exp, f64::exp, &d_exp)?;

        let mut d_gis = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let d_log_i = &d_step * tape.weights[i];
            let d_a = eig_fn_backward(&it.whitened[i], f64::ln, |l| 1.0 / l, &d_log_i)?;
            d_mats[i] += gis * &d_a * gis;
            d_gis += &d_a * gis * mats[i].matrix() + mats[i].matrix() * gis * &d_a;
        }

        let via_sqrt = eig_fn_backward(&it.g, f64::sqrt, |l| 0.5 / l.sqrt(), &d_gs_from_out)?;
        let via_invsqrt = eig_fn_backward(
            &it.g,
            |l| 1.0 / l.sqrt(),
            |l| -0.5 * l.powf(-1.5),
            &d_gis,
        )?;
        d_g = via_sqrt + via_invsqrt;
    }

    // Initialization: g_0 is the weighted arithmetic mean.
    for i in 0..n {
        d_mats[i] += &d_g * tape.weights[i];
        d_mats[i] = sym_part(&d_mats[i]);
    }
    Ok(d_mats)
}
