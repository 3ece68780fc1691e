//! Doubly-conditioned spatial modulation: two cascaded blocks, each
//! normalizing its feature and re-injecting a condition image through
//! learned per-pixel scale and shift maps. The first block conditions on
//! the guidance image, the second on the degraded source image.

use rand_chacha::ChaCha8Rng;

use crate::error::{RelitError, Result};
use crate::neural::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, instance_norm, instance_norm_backward,
    Conv2d,
};
use crate::neural::tensor::Tensor4;

/// One modulation stage: `IN(x) * (1 + eta(cond)) + phi(cond)` where the
/// producers are 3x3 same-size convolutions over the (resized) condition.
#[derive(Debug, Clone)]
pub struct SpadeSubBlock {
    pub conv_eta: Conv2d,
    pub conv_phi: Conv2d,
}

impl SpadeSubBlock {
    pub fn zeros(c_cond: usize, c_feat: usize) -> Self {
        Self {
            conv_eta: Conv2d::zeros(c_cond, c_feat, 3, 1, 1),
            conv_phi: Conv2d::zeros(c_cond, c_feat, 3, 1, 1),
        }
    }

    pub fn seeded(c_cond: usize, c_feat: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_eta: Conv2d::seeded(c_cond, c_feat, 3, 1, 1, rng),
            conv_phi: Conv2d::seeded(c_cond, c_feat, 3, 1, 1, rng),
        }
    }
}

/// Two cascaded modulation stages sharing one normalizer epsilon.
#[derive(Debug, Clone)]
pub struct MultiSpadeBlock {
    /// Conditions on the guidance render.
    pub guided: SpadeSubBlock,
    /// Conditions on the degraded source image.
    pub shaded: SpadeSubBlock,
    pub eps: f64,
}

impl MultiSpadeBlock {
    pub fn zeros(c_guidance: usize, c_shaded: usize, c_feat: usize) -> Self {
        Self {
            guided: SpadeSubBlock::zeros(c_guidance, c_feat),
            shaded: SpadeSubBlock::zeros(c_shaded, c_feat),
            eps: 1e-5,
        }
    }

    pub fn seeded(
        c_guidance: usize,
        c_shaded: usize,
        c_feat: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            guided: SpadeSubBlock::seeded(c_guidance, c_feat, rng),
            shaded: SpadeSubBlock::seeded(c_shaded, c_feat, rng),
            eps: 1e-5,
        }
    }
}

/// Per-parameter gradients of one sub-block's producers.
#[derive(Debug, Clone)]
pub struct SpadeSubGrads {
    pub d_eta_weight: Vec<f64>,
    pub d_eta_bias: Vec<f64>,
    pub d_phi_weight: Vec<f64>,
    pub d_phi_bias: Vec<f64>,
}

/// Gradients of the full cascade.
#[derive(Debug, Clone)]
pub struct MultiSpadeGrads {
    pub d_feat: Tensor4,
    pub d_guidance: Tensor4,
    pub d_shaded: Tensor4,
    pub guided: SpadeSubGrads,
    pub shaded: SpadeSubGrads,
}

fn resize_cond(cond: &Tensor4, h: usize, w: usize) -> Result<Tensor4> {
    adaptive_avg_pool(cond, h, w)
}

struct StageCache {
    cond_resized: Tensor4,
    eta: Tensor4,
    normalized: Tensor4,
    out: Tensor4,
}

fn stage_forward(
    sub: &SpadeSubBlock,
    x: &Tensor4,
    cond: &Tensor4,
    eps: f64,
) -> Result<StageCache> {
    let (n, c, h, w) = x.dims();
    let (cn, _, _, _) = cond.dims();
    if cn != n {
        return Err(RelitError::DimensionMismatch(format!(
            "condition batch {cn} vs feature batch {n}"
        )));
    }
    let cond_resized = resize_cond(cond, h, w)?;
    let eta = sub.conv_eta.forward(&cond_resized)?;
    let phi = sub.conv_phi.forward(&cond_resized)?;
    if eta.dims() != (n, c, h, w) {
        return Err(RelitError::DimensionMismatch(format!(
            "modulation maps {:?} vs feature {:?}",
            eta.dims(),
            (n, c, h, w)
        )));
    }
    let normalized = instance_norm(x, eps);
    let mut out = normalized.clone();
    for i in 0..out.numel() {
        out.data_mut()[i] = normalized.data()[i] * (1.0 + eta.data()[i]) + phi.data()[i];
    }
    Ok(StageCache {
        cond_resized,
        eta,
        normalized,
        out,
    })
}

fn stage_backward(
    sub: &SpadeSubBlock,
    x: &Tensor4,
    cond: &Tensor4,
    cache: &StageCache,
    upstream: &Tensor4,
    eps: f64,
) -> Result<(Tensor4, Tensor4, SpadeSubGrads)> {
    let mut d_norm = upstream.clone();
    let mut d_eta = upstream.clone();
    for i in 0..d_norm.numel() {
        d_norm.data_mut()[i] = upstream.data()[i] * (1.0 + cache.eta.data()[i]);
        d_eta.data_mut()[i] = upstream.data()[i] * cache.normalized.data()[i];
    }
    let d_phi = upstream;

    let eta_grads = sub.conv_eta.backward(&cache.cond_resized, &d_eta)?;
    let phi_grads = sub.conv_phi.backward(&cache.cond_resized, d_phi)?;
    let d_cond_resized = eta_grads.d_input.add(&phi_grads.d_input)?;
    let d_cond = adaptive_avg_pool_backward(cond, &d_cond_resized)?;
    let d_x = instance_norm_backward(x, &d_norm, eps)?;
    Ok((
        d_x,
        d_cond,
        SpadeSubGrads {
            d_eta_weight: eta_grads.d_weight,
            d_eta_bias: eta_grads.d_bias,
            d_phi_weight: phi_grads.d_weight,
            d_phi_bias: phi_grads.d_bias,
        },
    ))
}

/// `y1 = IN(feat) * (1 + eta_g) + phi_g`, then
/// `out = IN(y1) * (1 + eta_s) + phi_s`.
pub fn multi_spade_forward(
    block: &MultiSpadeBlock,
    feat: &Tensor4,
    guidance: &Tensor4,
    shaded: &Tensor4,
) -> Result<Tensor4> {
    let first = stage_forward(&block.guided, feat, guidance, block.eps)?;
    let second = stage_forward(&block.shaded, &first.out, shaded, block.eps)?;
    Ok(second.out)
}

pub fn multi_spade_backward(
    block: &MultiSpadeBlock,
    feat: &Tensor4,
    guidance: &Tensor4,
    shaded: &Tensor4,
    upstream: &Tensor4,
) -> Result<MultiSpadeGrads> {
    let first = stage_forward(&block.guided, feat, guidance, block.eps)?;
    let second = stage_forward(&block.shaded, &first.out, shaded, block.eps)?;
    if !upstream.same_dims(&second.out) {
        return Err(RelitError::DimensionMismatch(format!(
            "upstream dims {:?} vs output {:?}",
            upstream.dims(),
            second.out.dims()
        )));
    }
    let (d_y1, d_shaded, shaded_grads) =
        stage_backward(&block.shaded, &first.out, shaded, &second, upstream, block.eps)?;
    let (d_feat, d_guidance, guided_grads) =
        stage_backward(&block.guided, feat, guidance, &first, &d_y1, block.eps)?;
    Ok(MultiSpadeGrads {
        d_feat,
        d_guidance,
        d_shaded,
        guided: guided_grads,
        shaded: shaded_grads,
    })
}
