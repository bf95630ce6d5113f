//! Standalone loss pieces for the world model: categorical KL with balancing,
//! unit-variance Gaussian likelihoods, per-pixel mask cross-entropy, and the
//! mask-gated reconstruction term.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{Array2, ArrayD};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Per-row KL divergence between categorical distributions given logits of
/// shape (R, C): KL(p || q) = sum p (log p - log q). Returns an (R,) vector.
pub fn categorical_kl(p_logits: &Tensor, q_logits: &Tensor) -> Tensor {
    let p = p_logits.softmax_rows();
    let lp = p_logits.log_softmax_rows();
    let lq = q_logits.log_softmax_rows();
    p.mul(&lp.sub(&lq)).sum_rows()
}

/// KL with gradient balancing: alpha weights the prior-training term (frozen
/// posterior), 1 - alpha the posterior-regularizing term (frozen prior). The
/// value equals the plain KL; only the gradient split changes.
pub fn balanced_kl(post_logits: &Tensor, prior_logits: &Tensor, alpha: f64) -> Tensor {
    let prior_part = categorical_kl(&post_logits.detach(), prior_logits).mul_scalar(alpha);
    let post_part = categorical_kl(post_logits, &prior_logits.detach()).mul_scalar(1.0 - alpha);
    prior_part.add(&post_part)
}

/// Mean over rows of the dimension-summed unit-variance Gaussian NLL
/// 0.5 (x - mu)^2 + 0.5 ln(2 pi) of predictions (R, D) against targets.
pub fn gaussian_nll(pred: &Tensor, target: &ArrayD<f64>) -> Tensor {
    let rows = pred.shape()[0];
    let diff = pred.sub(&Tensor::constant(target.clone()));
    diff.square()
        .mul_scalar(0.5)
        .add_scalar(0.5 * LN_2PI)
        .sum_all()
        .mul_scalar(1.0 / rows as f64)
}

/// Per-pixel categorical cross-entropy of slot logits (R, S) against hard
/// labels, averaged over rows. Zero exactly when the predicted distribution
/// puts all mass on the label.
pub fn mask_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract("mask CE: logits rows must match labels"));
    }
    let slots = shape[1];
    let mut one_hot = Array2::<f64>::zeros((labels.len(), slots));
    for (r, &l) in labels.iter().enumerate() {
        if l >= slots {
            return Err(Error::contract(format!("mask CE: label {l} out of range")));
        }
        one_hot[[r, l]] = 1.0;
    }
    let lp = logits.log_softmax_rows();
    Ok(lp
        .mul(&Tensor::constant(one_hot.into_dyn()))
        .sum_all()
        .mul_scalar(-1.0 / labels.len() as f64))
}

/// Reconstruction NLL restricted to a slot's ground-truth pixels: the mask
/// (B, H*W) gates every channel; the result is the mean NLL per masked
/// pixel-channel. `None` when the slot owns no pixels in the batch.
pub fn masked_recon_nll(
    recon: &Tensor,
    target: &ArrayD<f64>,
    mask: &Array2<f64>,
) -> Result<Option<Tensor>> {
    let shape = recon.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::contract("masked recon: expected (B, C, H, W)"));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if mask.nrows() != b || mask.ncols() != h * w {
        return Err(Error::contract("masked recon: mask shape mismatch"));
    }
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(None);
    }
    // Tile the per-pixel mask across channels, matching (B, C, H, W) layout.
    let mut tiled = ArrayD::<f64>::zeros(vec![b, c, h * w]);
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..h * w {
                tiled[[bi, ci, p]] = mask[[bi, p]];
            }
        }
    }
    let tiled = tiled.into_shape_with_order(vec![b, c, h, w]).unwrap();
    let diff = recon.sub(&Tensor::constant(target.clone()));
    let nll = diff.square().mul_scalar(0.5).add_scalar(0.5 * LN_2PI);
    Ok(Some(
        nll.mul(&Tensor::constant(tiled))
            .sum_all()
            .mul_scalar(1.0 / (count * c as f64)),
    ))
}
