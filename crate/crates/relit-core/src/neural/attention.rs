//! Guidance-queried attention: queries come from a warped guidance image,
//! keys and values from the input feature map. Tokens are spatial
//! positions; attention mixes value vectors across the whole frame.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::error::{RelitError, Result};
use crate::neural::ops::{adaptive_avg_pool, adaptive_avg_pool_backward};
use crate::neural::tensor::Tensor4;

/// Resamples the guidance to the feature grid before the query projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warp {
    /// Average-pool (or replicate) to the target spatial dims.
    AdaptiveAvgPool,
    /// Require matching dims and pass through.
    Identity,
}

impl Warp {
    fn apply(&self, guidance: &Tensor4, h: usize, w: usize) -> Result<Tensor4> {
        match self {
            Warp::AdaptiveAvgPool => adaptive_avg_pool(guidance, h, w),
            Warp::Identity => {
                let (_, _, gh, gw) = guidance.dims();
                if (gh, gw) != (h, w) {
                    return Err(RelitError::DimensionMismatch(format!(
                        "identity warp needs guidance {h}x{w}, got {gh}x{gw}"
                    )));
                }
                Ok(guidance.clone())
            }
        }
    }

    fn backward(&self, guidance: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
        match self {
            Warp::AdaptiveAvgPool => adaptive_avg_pool_backward(guidance, upstream),
            Warp::Identity => Ok(upstream.clone()),
        }
    }
}

/// Channel-mixing attention parameters.
///
/// `w_q` maps guidance channels to the token dim `D`; `w_k` and `w_v` map
/// feature channels to `D`. The output token dim is `D`, so choosing
/// `D` equal to the feature channel count makes the block shape-preserving.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    /// guidance channels x D
    pub w_q: DMatrix<f64>,
    /// feature channels x D
    pub w_k: DMatrix<f64>,
    /// feature channels x D
    pub w_v: DMatrix<f64>,
    pub warp: Warp,
    /// Divide logits by sqrt(D). On by default for numeric headroom.
    pub scaled: bool,
}

/// Gradients for every attention input and parameter.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_w_q: DMatrix<f64>,
    pub d_w_k: DMatrix<f64>,
    pub d_w_v: DMatrix<f64>,
    pub d_feat_in: Tensor4,
    pub d_guidance: Tensor4,
}

impl AttentionBlock {
    pub fn seeded(
        c_guidance: usize,
        c_in: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut draw = |rows: usize, scale: f64| {
            let t = Tensor4::seeded_normal(1, 1, rows, d, scale, rng);
            DMatrix::from_fn(rows, d, |i, j| t.at(0, 0, i, j))
        };
        let sq = (1.0 / c_guidance as f64).sqrt();
        let sf = (1.0 / c_in as f64).sqrt();
        Self {
            w_q: draw(c_guidance, sq),
            w_k: draw(c_in, sf),
            w_v: draw(c_in, sf),
            warp: Warp::AdaptiveAvgPool,
            scaled: true,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.ncols();
        if d == 0 {
            return Err(RelitError::InvalidArgument("token dim 0".into()));
        }
        if self.w_k.ncols() != d || self.w_v.ncols() != d {
            return Err(RelitError::DimensionMismatch(format!(
                "projection widths differ: q {}, k {}, v {}",
                d,
                self.w_k.ncols(),
                self.w_v.ncols()
            )));
        }
        if self.w_k.nrows() != self.w_v.nrows() {
            return Err(RelitError::DimensionMismatch(format!(
                "key/value input channels differ: {} vs {}",
                self.w_k.nrows(),
                self.w_v.nrows()
            )));
        }
        Ok(())
    }

    fn logit_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.token_dim() as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Tokens of one batch item as a (H*W) x C matrix.
fn tokens_of(t: &Tensor4, n: usize) -> DMatrix<f64> {
    let (_, c, h, w) = t.dims();
    DMatrix::from_fn(h * w, c, |tok, ci| t.at(n, ci, tok / w, tok % w))
}

fn tokens_into(dst: &mut Tensor4, n: usize, m: &DMatrix<f64>) {
    let (_, c, h, w) = dst.dims();
    debug_assert_eq!(m.nrows(), h * w);
    debug_assert_eq!(m.ncols(), c);
    for tok in 0..h * w {
        for ci in 0..c {
            *dst.at_mut(n, ci, tok / w, tok % w) = m[(tok, ci)];
        }
    }
}

/// Row-wise softmax with max subtraction.
fn row_softmax(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = s.clone();
    for mut row in a.row_iter_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    a
}

fn check_shapes(block: &AttentionBlock, feat_in: &Tensor4, guidance: &Tensor4) -> Result<()> {
    block.validate()?;
    let (fn_, fc, _, _) = feat_in.dims();
    let (gn, gc, _, _) = guidance.dims();
    if fn_ != gn {
        return Err(RelitError::DimensionMismatch(format!(
            "batch sizes differ: feature {fn_} vs guidance {gn}"
        )));
    }
    if fc != self_k_rows(block) {
        return Err(RelitError::DimensionMismatch(format!(
            "feature has {fc} channels, key projection expects {}",
            self_k_rows(block)
        )));
    }
    if gc != block.w_q.nrows() {
        return Err(RelitError::DimensionMismatch(format!(
            "guidance has {gc} channels, query projection expects {}",
            block.w_q.nrows()
        )));
    }
    Ok(())
}

fn self_k_rows(block: &AttentionBlock) -> usize {
    block.w_k.nrows()
}

/// Output token `t` is `sum_s A[t,s] * V[s]` with `A = softmax(Q K^T)`
/// row-wise; output shape is `(N, D, H, W)` on the feature grid.
pub fn attention_forward(
    block: &AttentionBlock,
    feat_in: &Tensor4,
    guidance: &Tensor4,
) -> Result<Tensor4> {
    check_shapes(block, feat_in, guidance)?;
    let (n, _, h, w) = feat_in.dims();
    let warped = block.warp.apply(guidance, h, w)?;
    let alpha = block.logit_scale();
    let mut out = Tensor4::zeros(n, block.token_dim(), h, w);
    for ni in 0..n {
        let gm = tokens_of(&warped, ni);
        let fm = tokens_of(feat_in, ni);
        let q = &gm * &block.w_q;
        let k = &fm * &block.w_k;
        let v = &fm * &block.w_v;
        let a = row_softmax(&(alpha * &q * k.transpose()));
        tokens_into(&mut out, ni, &(a * v));
    }
    Ok(out)
}

/// Analytic gradients through the softmax and all three projections.
pub fn attention_backward(
    block: &AttentionBlock,
    feat_in: &Tensor4,
    guidance: &Tensor4,
    upstream: &Tensor4,
) -> Result<AttentionGrads> {
    check_shapes(block, feat_in, guidance)?;
    let (n, _, h, w) = feat_in.dims();
    if upstream.dims() != (n, block.token_dim(), h, w) {
        return Err(RelitError::DimensionMismatch(format!(
            "upstream dims {:?} vs attention output {:?}",
            upstream.dims(),
            (n, block.token_dim(), h, w)
        )));
    }
    let warped = block.warp.apply(guidance, h, w)?;
    let alpha = block.logit_scale();

    let mut d_w_q = DMatrix::zeros(block.w_q.nrows(), block.w_q.ncols());
    let mut d_w_k = DMatrix::zeros(block.w_k.nrows(), block.w_k.ncols());
    let mut d_w_v = DMatrix::zeros(block.w_v.nrows(), block.w_v.ncols());
    let mut d_feat = Tensor4::zeros(feat_in.dims().0, feat_in.dims().1, h, w);
    let mut d_warped = Tensor4::zeros(warped.dims().0, warped.dims().1, h, w);

    for ni in 0..n {
        let gm = tokens_of(&warped, ni);
        let fm = tokens_of(feat_in, ni);
        let q = &gm * &block.w_q;
        let k = &fm * &block.w_k;
        let v = &fm * &block.w_v;
        let a = row_softmax(&(alpha * &q * k.transpose()));
        let d_out = tokens_of(upstream, ni);

        let d_a = &d_out * v.transpose();
        let d_v = a.transpose() * &d_out;
        // softmax jacobian per row: dS = A .* (dA - rowsum(dA .* A))
        let mut d_s = DMatrix::zeros(a.nrows(), a.ncols());
        for t in 0..a.nrows() {
            let dot: f64 = (0..a.ncols()).map(|s| d_a[(t, s)] * a[(t, s)]).sum();
            for s in 0..a.ncols() {
                d_s[(t, s)] = a[(t, s)] * (d_a[(t, s)] - dot);
            }
        }
        let d_q = alpha * &d_s * &k;
        let d_k = alpha * d_s.transpose() * &q;

        d_w_q += gm.transpose() * &d_q;
        d_w_k += fm.transpose() * &d_k;
        d_w_v += fm.transpose() * &d_v;
        let d_gm = d_q * block.w_q.transpose();
        let d_fm = d_k * block.w_k.transpose() + d_v * block.w_v.transpose();
        tokens_into(&mut d_warped, ni, &d_gm);
        tokens_into(&mut d_feat, ni, &d_fm);
    }

    let d_guidance = block.warp.backward(guidance, &d_warped)?;
    Ok(AttentionGrads {
        d_w_q,
        d_w_k,
        d_w_v,
        d_feat_in: d_feat,
        d_guidance,
    })
}
