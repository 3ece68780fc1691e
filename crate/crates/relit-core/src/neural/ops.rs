//! Dense layer primitives: convolution, instance normalization,
//! activations, and adaptive average pooling, each with an analytic
//! backward pass.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{RelitError, Result};
use crate::neural::tensor::Tensor4;

/// Plain 2-d convolution with square kernel, zero padding, and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Layout `[c_out][c_in][ky][kx]`, flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients from one convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_input: Tensor4,
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            weight: vec![0.0; c_out * c_in * kernel * kernel],
            bias: vec![0.0; c_out],
        }
    }

    /// Xavier-style init: weights `N(0, 1/(c_in*k*k))`, zero bias.
    pub fn seeded(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut conv = Self::zeros(c_in, c_out, kernel, stride, pad);
        let scale = (1.0 / (c_in * kernel * kernel) as f64).sqrt();
        for w in conv.weight.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *w = scale * g;
        }
        conv
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kernel + ky) * self.kernel + kx
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(RelitError::InvalidArgument("conv stride 0".into()));
        }
        let he = h + 2 * self.pad;
        let we = w + 2 * self.pad;
        if he < self.kernel || we < self.kernel {
            return Err(RelitError::DimensionMismatch(format!(
                "kernel {} exceeds padded input {}x{}",
                self.kernel, he, we
            )));
        }
        Ok(((he - self.kernel) / self.stride + 1, (we - self.kernel) / self.stride + 1))
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = x.dims();
        if c != self.c_in {
            return Err(RelitError::DimensionMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let (oh, ow) = self.out_dims(h, w)?;
        let mut out = Tensor4::zeros(n, self.c_out, oh, ow);
        for ni in 0..n {
            for co in 0..self.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = self.bias[co];
                        for ci in 0..self.c_in {
                            for ky in 0..self.kernel {
                                for kx in 0..self.kernel {
                                    let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                                    let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                                    if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += self.weight[self.widx(co, ci, ky, kx)]
                                        * x.at(ni, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        *out.at_mut(ni, co, oy, ox) = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor4, upstream: &Tensor4) -> Result<ConvGrads> {
        let (n, c, h, w) = x.dims();
        if c != self.c_in {
            return Err(RelitError::DimensionMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let (oh, ow) = self.out_dims(h, w)?;
        if upstream.dims() != (n, self.c_out, oh, ow) {
            return Err(RelitError::DimensionMismatch(format!(
                "upstream dims {:?} vs conv output {:?}",
                upstream.dims(),
                (n, self.c_out, oh, ow)
            )));
        }
        let mut d_weight = vec![0.0; self.weight.len()];
        let mut d_bias = vec![0.0; self.bias.len()];
        let mut d_input = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for co in 0..self.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = upstream.at(ni, co, oy, ox);
                        if g == 0.0 {
                            continue;
                        }
                        d_bias[co] += g;
                        for ci in 0..self.c_in {
                            for ky in 0..self.kernel {
                                for kx in 0..self.kernel {
                                    let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                                    let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                                    if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let wi = self.widx(co, ci, ky, kx);
                                    d_weight[wi] += g * x.at(ni, ci, iy as usize, ix as usize);
                                    *d_input.at_mut(ni, ci, iy as usize, ix as usize) +=
                                        g * self.weight[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            d_weight,
            d_bias,
            d_input,
        })
    }
}

/// Per-sample, per-channel normalization to zero mean and unit variance
/// (population variance, denominator stabilized by `eps`).
pub fn instance_norm(x: &Tensor4, eps: f64) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let count = (h * w) as f64;
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let mut mean = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    mean += x.at(ni, ci, y, xx);
                }
            }
            mean /= count;
            let mut var = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    let d = x.at(ni, ci, y, xx) - mean;
                    var += d * d;
                }
            }
            var /= count;
            let inv = 1.0 / (var + eps).sqrt();
            for y in 0..h {
                for xx in 0..w {
                    *out.at_mut(ni, ci, y, xx) = (x.at(ni, ci, y, xx) - mean) * inv;
                }
            }
        }
    }
    out
}

/// Backward of [`instance_norm`]:
/// `dx = inv * (u - mean(u) - y * mean(u*y))` per channel.
pub fn instance_norm_backward(x: &Tensor4, upstream: &Tensor4, eps: f64) -> Result<Tensor4> {
    if !x.same_dims(upstream) {
        return Err(RelitError::DimensionMismatch(format!(
            "upstream dims {:?} vs input {:?}",
            upstream.dims(),
            x.dims()
        )));
    }
    let (n, c, h, w) = x.dims();
    let count = (h * w) as f64;
    let y_t = instance_norm(x, eps);
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    mean += x.at(ni, ci, yy, xx);
                }
            }
            mean /= count;
            for yy in 0..h {
                for xx in 0..w {
                    let d = x.at(ni, ci, yy, xx) - mean;
                    var += d * d;
                }
            }
            var /= count;
            let inv = 1.0 / (var + eps).sqrt();
            let mut mean_u = 0.0;
            let mut mean_uy = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    let u = upstream.at(ni, ci, yy, xx);
                    mean_u += u;
                    mean_uy += u * y_t.at(ni, ci, yy, xx);
                }
            }
            mean_u /= count;
            mean_uy /= count;
            for yy in 0..h {
                for xx in 0..w {
                    let u = upstream.at(ni, ci, yy, xx);
                    let y = y_t.at(ni, ci, yy, xx);
                    *out.at_mut(ni, ci, yy, xx) = inv * (u - mean_u - y * mean_uy);
                }
            }
        }
    }
    Ok(out)
}

pub fn tanh_forward(x: &Tensor4) -> Tensor4 {
    x.map(f64::tanh)
}

pub fn tanh_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    upstream.zip_map(x, |u, xi| {
        let t = xi.tanh();
        u * (1.0 - t * t)
    })
}

pub fn sigmoid_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    upstream.zip_map(x, |u, xi| {
        let s = 1.0 / (1.0 + (-xi).exp());
        u * s * (1.0 - s)
    })
}

/// Bounds of the pooling region feeding output cell `i` (half-open).
#[inline]
fn pool_region(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end.max(start + 1).min(in_len))
}

/// Average pooling to an arbitrary output grid; each output cell averages
/// its integer-partition input region.
pub fn adaptive_avg_pool(x: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.dims();
    if out_h == 0 || out_w == 0 {
        return Err(RelitError::InvalidArgument("pool output dims 0".into()));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let mut out = Tensor4::zeros(n, c, out_h, out_w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = pool_region(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_region(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.at(ni, ci, y, xx);
                        }
                    }
                    *out.at_mut(ni, ci, oy, ox) = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`adaptive_avg_pool`]; distributes each output gradient
/// uniformly over its input region.
pub fn adaptive_avg_pool_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = x.dims();
    let (un, uc, oh, ow) = upstream.dims();
    if un != n || uc != c {
        return Err(RelitError::DimensionMismatch(format!(
            "upstream batch/channels {:?} vs input {:?}",
            (un, uc),
            (n, c)
        )));
    }
    if oh == h && ow == w {
        return Ok(upstream.clone());
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1) = pool_region(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_region(ox, w, ow);
                    let share = upstream.at(ni, ci, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            *out.at_mut(ni, ci, y, xx) += share;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
