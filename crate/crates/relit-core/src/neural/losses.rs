//! Adversarial, feature-matching, and perceptual objectives, plus the
//! weighted total. The GAN loss operates on multi-scale probability maps;
//! the perceptual loss uses a small fixed-weight convolution stack in
//! place of a pretrained network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RelitError, Result};
use crate::neural::ops::{tanh_backward, tanh_forward, Conv2d};
use crate::neural::tensor::Tensor4;

/// Weights for the non-adversarial terms; both default to 10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_percep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 10.0,
            lambda_percep: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0 && self.lambda_fm.is_finite())
            || !(self.lambda_percep >= 0.0 && self.lambda_percep.is_finite())
        {
            return Err(RelitError::InvalidArgument(format!(
                "loss weights must be finite and >= 0, got ({}, {})",
                self.lambda_fm, self.lambda_percep
            )));
        }
        Ok(())
    }
}

/// The three scalar loss components entering the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gan: f64,
    pub fm: f64,
    pub percep: f64,
}

/// `gan + lambda_fm * fm + lambda_percep * percep`.
pub fn total_objective(parts: LossParts, weights: LossWeights) -> f64 {
    parts.gan + weights.lambda_fm * parts.fm + weights.lambda_percep * parts.percep
}

const PROB_FLOOR: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Two-sided cross-entropy over per-scale probability maps, mean-reduced
/// within each scale and summed across scales. Returns
/// `(discriminator loss, non-saturating generator loss)`. Inputs are
/// probabilities; values are clamped away from 0 and 1 before the log.
pub fn gan_loss(d_real: &[Tensor4], d_fake: &[Tensor4]) -> (f64, f64) {
    let mut loss_d = 0.0;
    for scale in d_real {
        let n = scale.numel() as f64;
        loss_d += scale.data().iter().map(|&p| -clamp_prob(p).ln()).sum::<f64>() / n;
    }
    let mut loss_g = 0.0;
    for scale in d_fake {
        let n = scale.numel() as f64;
        loss_d += scale
            .data()
            .iter()
            .map(|&p| -(1.0 - clamp_prob(p)).ln())
            .sum::<f64>()
            / n;
        loss_g += scale.data().iter().map(|&p| -clamp_prob(p).ln()).sum::<f64>() / n;
    }
    (loss_d, loss_g)
}

/// Analytic gradients of [`gan_loss`] with respect to the probability
/// maps: `(d loss_D / d real, d loss_D / d fake, d loss_G / d fake)`.
/// Entries that were clamped get zero gradient.
pub fn gan_loss_grads(
    d_real: &[Tensor4],
    d_fake: &[Tensor4],
) -> (Vec<Tensor4>, Vec<Tensor4>, Vec<Tensor4>) {
    let in_range = |p: f64| p > PROB_FLOOR && p < 1.0 - PROB_FLOOR;
    let d_real_grads = d_real
        .iter()
        .map(|scale| {
            let n = scale.numel() as f64;
            scale.map(|p| if in_range(p) { -1.0 / (n * p) } else { 0.0 })
        })
        .collect();
    let d_fake_grads_d = d_fake
        .iter()
        .map(|scale| {
            let n = scale.numel() as f64;
            scale.map(|p| if in_range(p) { 1.0 / (n * (1.0 - p)) } else { 0.0 })
        })
        .collect();
    let d_fake_grads_g = d_fake
        .iter()
        .map(|scale| {
            let n = scale.numel() as f64;
            scale.map(|p| if in_range(p) { -1.0 / (n * p) } else { 0.0 })
        })
        .collect();
    (d_real_grads, d_fake_grads_d, d_fake_grads_g)
}

/// `sum_i (1/N_i) * L1(fake_i, real_i)` over per-layer feature lists.
pub fn feature_matching_loss(feats_real: &[Tensor4], feats_fake: &[Tensor4]) -> Result<f64> {
    if feats_real.len() != feats_fake.len() {
        return Err(RelitError::DimensionMismatch(format!(
            "feature list lengths differ: {} vs {}",
            feats_real.len(),
            feats_fake.len()
        )));
    }
    let mut total = 0.0;
    for (i, (a, b)) in feats_real.iter().zip(feats_fake).enumerate() {
        if !a.same_dims(b) {
            return Err(RelitError::DimensionMismatch(format!(
                "feature layer {i}: dims {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let n = a.numel() as f64;
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
    }
    Ok(total)
}

/// Gradient of [`feature_matching_loss`] with respect to the fake
/// features: `sign(fake_i - real_i) / N_i` per layer.
pub fn feature_matching_grads(
    feats_real: &[Tensor4],
    feats_fake: &[Tensor4],
) -> Result<Vec<Tensor4>> {
    if feats_real.len() != feats_fake.len() {
        return Err(RelitError::DimensionMismatch(format!(
            "feature list lengths differ: {} vs {}",
            feats_real.len(),
            feats_fake.len()
        )));
    }
    feats_real
        .iter()
        .zip(feats_fake)
        .map(|(real, fake)| {
            let n = fake.numel() as f64;
            fake.zip_map(real, |f, r| {
                if f > r {
                    1.0 / n
                } else if f < r {
                    -1.0 / n
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Fixed-weight feature stack standing in for a pretrained perceptual
/// network: K tanh-activated convolutions, features tapped after each.
/// An empty stack acts as a single identity layer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub layers: Vec<Conv2d>,
}

impl FeatureExtractor {
    /// Five 3x3 layers over RGB input, strides 1,2,1,2,1; weights drawn
    /// from the seed and then frozen.
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strides = [1usize, 2, 1, 2, 1];
        let mut layers = Vec::new();
        let mut c_in = 3;
        for s in strides {
            layers.push(Conv2d::seeded(c_in, 4, 3, s, 1, &mut rng));
            c_in = 4;
        }
        Self { layers }
    }

    /// Single identity layer: features are the image itself.
    pub fn identity() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len().max(1)
    }

    /// Post-activation features after each layer (or the input itself for
    /// the identity extractor).
    pub fn features(&self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        if self.layers.is_empty() {
            return Ok(vec![x.clone()]);
        }
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for conv in &self.layers {
            let z = conv.forward(&cur)?;
            cur = tanh_forward(&z);
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    /// Features plus the pre-activation tensors and layer inputs needed
    /// for backpropagation.
    fn features_cached(&self, x: &Tensor4) -> Result<(Vec<Tensor4>, Vec<Tensor4>, Vec<Tensor4>)> {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut cur = x.clone();
        for conv in &self.layers {
            inputs.push(cur.clone());
            let z = conv.forward(&cur)?;
            cur = tanh_forward(&z);
            pre.push(z);
            post.push(cur.clone());
        }
        Ok((inputs, pre, post))
    }
}

/// `sum_i (1/M_i) * L1(features_i(a), features_i(b))`.
pub fn perceptual_loss(extractor: &FeatureExtractor, a: &Tensor4, b: &Tensor4) -> Result<f64> {
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    feature_matching_loss(&fa, &fb)
}

/// Loss plus its gradient with respect to `a`, backpropagated through the
/// extractor stack.
pub fn perceptual_loss_grad(
    extractor: &FeatureExtractor,
    a: &Tensor4,
    b: &Tensor4,
) -> Result<(f64, Tensor4)> {
    if extractor.layers.is_empty() {
        let loss = perceptual_loss(extractor, a, b)?;
        let n = a.numel() as f64;
        let grad = a.zip_map(b, |x, y| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })?;
        return Ok((loss, grad));
    }
    let (inputs, pre, post) = extractor.features_cached(a)?;
    let fb = extractor.features(b)?;
    let loss = feature_matching_loss(&post, &fb)?;
    let taps = feature_matching_grads(&fb, &post)?; // d loss / d post (fake side = a)

    let mut downstream: Option<Tensor4> = None;
    for j in (0..extractor.layers.len()).rev() {
        let g_post = match downstream {
            Some(d) => taps[j].add(&d)?,
            None => taps[j].clone(),
        };
        let g_pre = tanh_backward(&pre[j], &g_post)?;
        downstream = Some(extractor.layers[j].backward(&inputs[j], &g_pre)?.d_input);
    }
    Ok((loss, downstream.expect("non-empty layer stack")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn perfect_discriminator_drives_loss_to_zero() {
        let delta = 1e-6;
        let real: Vec<Tensor4> = (0..3).map(|_| Tensor4::zeros(1, 1, 2, 2).map(|_| 1.0 - delta)).collect();
        let fake: Vec<Tensor4> = (0..3).map(|_| Tensor4::zeros(1, 1, 2, 2).map(|_| delta)).collect();
        let (loss_d, _) = gan_loss(&real, &fake);
        assert!(loss_d < 1e-5, "loss_d {loss_d}");
    }

    #[test]
    fn indifferent_discriminator_gives_two_log_two_per_scale() {
        let half: Vec<Tensor4> = (0..3).map(|_| Tensor4::zeros(1, 1, 4, 4).map(|_| 0.5)).collect();
        let (loss_d, loss_g) = gan_loss(&half, &half);
        let per_scale = -2.0 * 0.5f64.ln();
        assert!((loss_d - 3.0 * per_scale).abs() < 1e-12);
        assert!((loss_g - 3.0 * (-0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_matches_scalar_oracle() {
        let mut r = rng(1);
        let real: Vec<Tensor4> = (0..3)
            .map(|_| Tensor4::seeded_normal(1, 1, 3, 3, 1.0, &mut r).map(|v| 1.0 / (1.0 + (-v).exp())))
            .collect();
        let fake: Vec<Tensor4> = (0..3)
            .map(|_| Tensor4::seeded_normal(1, 1, 3, 3, 1.0, &mut r).map(|v| 1.0 / (1.0 + (-v).exp())))
            .collect();
        let (loss_d, loss_g) = gan_loss(&real, &fake);

        let mut want_d = 0.0;
        let mut want_g = 0.0;
        for k in 0..3 {
            let n = real[k].numel() as f64;
            let mut s = 0.0;
            for &p in real[k].data() {
                s += -p.ln();
            }
            want_d += s / n;
            let n = fake[k].numel() as f64;
            let mut s = 0.0;
            let mut sg = 0.0;
            for &p in fake[k].data() {
                s += -(1.0 - p).ln();
                sg += -p.ln();
            }
            want_d += s / n;
            want_g += sg / n;
        }
        assert!((loss_d - want_d).abs() < 1e-12);
        assert!((loss_g - want_g).abs() < 1e-12);
    }

    #[test]
    fn gan_gradients_match_finite_differences() {
        let mut r = rng(2);
        let real: Vec<Tensor4> = (0..2)
            .map(|_| Tensor4::seeded_normal(1, 1, 2, 2, 0.5, &mut r).map(|v| 0.5 + 0.3 * v.tanh()))
            .collect();
        let fake: Vec<Tensor4> = (0..2)
            .map(|_| Tensor4::seeded_normal(1, 1, 2, 2, 0.5, &mut r).map(|v| 0.5 + 0.3 * v.tanh()))
            .collect();
        let (g_real_d, g_fake_d, g_fake_g) = gan_loss_grads(&real, &fake);
        let h = 1e-6;
        for k in 0..2 {
            for i in 0..4 {
                let mut rp = real.clone();
                let mut rm = real.clone();
                rp[k].data_mut()[i] += h;
                rm[k].data_mut()[i] -= h;
                let fd = (gan_loss(&rp, &fake).0 - gan_loss(&rm, &fake).0) / (2.0 * h);
                let an = g_real_d[k].data()[i];
                assert!((fd - an).abs() / fd.abs().max(1e-4) < 1e-3, "{fd} vs {an}");

                let mut fp = fake.clone();
                let mut fm = fake.clone();
                fp[k].data_mut()[i] += h;
                fm[k].data_mut()[i] -= h;
                let fd_d = (gan_loss(&real, &fp).0 - gan_loss(&real, &fm).0) / (2.0 * h);
                let an_d = g_fake_d[k].data()[i];
                assert!((fd_d - an_d).abs() / fd_d.abs().max(1e-4) < 1e-3);
                let fd_g = (gan_loss(&real, &fp).1 - gan_loss(&real, &fm).1) / (2.0 * h);
                let an_g = g_fake_g[k].data()[i];
                assert!((fd_g - an_g).abs() / fd_g.abs().max(1e-4) < 1e-3);
            }
        }
    }

    #[test]
    fn identical_features_cost_nothing() {
        let mut r = rng(3);
        let feats: Vec<Tensor4> = (0..5)
            .map(|_| Tensor4::seeded_normal(1, 2, 3, 3, 1.0, &mut r))
            .collect();
        assert_eq!(feature_matching_loss(&feats, &feats).unwrap(), 0.0);
    }

    #[test]
    fn two_element_layer_example() {
        let real = vec![Tensor4::from_vec(1, 1, 1, 2, vec![0.0, 0.0]).unwrap()];
        let fake = vec![Tensor4::from_vec(1, 1, 1, 2, vec![0.2, -0.4]).unwrap()];
        let loss = feature_matching_loss(&real, &fake).unwrap();
        assert!((loss - 0.3).abs() < 1e-15);
    }

    #[test]
    fn feature_matching_matches_independent_accumulation() {
        let mut r = rng(4);
        let real: Vec<Tensor4> = (0..5)
            .map(|i| Tensor4::seeded_normal(1, 2, 3 + i, 3, 1.0, &mut r))
            .collect();
        let fake: Vec<Tensor4> = real
            .iter()
            .map(|t| {
                let noise = Tensor4::seeded_normal(
                    t.dims().0,
                    t.dims().1,
                    t.dims().2,
                    t.dims().3,
                    0.3,
                    &mut r,
                );
                t.add(&noise).unwrap()
            })
            .collect();
        let got = feature_matching_loss(&real, &fake).unwrap();
        let mut want = 0.0;
        for (a, b) in real.iter().zip(&fake) {
            let mut layer = 0.0;
            for (x, y) in a.data().iter().zip(b.data()) {
                layer += (x - y).abs();
            }
            want += layer / a.numel() as f64;
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn feature_matching_rejects_shape_mismatch() {
        let a = vec![Tensor4::zeros(1, 1, 2, 2)];
        let b = vec![Tensor4::zeros(1, 1, 2, 3)];
        assert!(feature_matching_loss(&a, &b).is_err());
        let c = vec![Tensor4::zeros(1, 1, 2, 2), Tensor4::zeros(1, 1, 2, 2)];
        assert!(feature_matching_loss(&a, &c).is_err());
    }

    #[test]
    fn losses_are_symmetric() {
        let mut r = rng(5);
        let a = Tensor4::seeded_normal(1, 3, 8, 8, 0.5, &mut r);
        let b = Tensor4::seeded_normal(1, 3, 8, 8, 0.5, &mut r);
        let ex = FeatureExtractor::toy(7);
        assert_eq!(
            perceptual_loss(&ex, &a, &b).unwrap(),
            perceptual_loss(&ex, &b, &a).unwrap()
        );
        let fa = ex.features(&a).unwrap();
        let fb = ex.features(&b).unwrap();
        assert_eq!(
            feature_matching_loss(&fa, &fb).unwrap(),
            feature_matching_loss(&fb, &fa).unwrap()
        );
    }

    #[test]
    fn perceptual_identity_extractor_is_plain_l1() {
        let mut r = rng(6);
        let a = Tensor4::seeded_normal(1, 3, 4, 4, 1.0, &mut r);
        let b = Tensor4::seeded_normal(1, 3, 4, 4, 1.0, &mut r);
        let ex = FeatureExtractor::identity();
        let got = perceptual_loss(&ex, &a, &b).unwrap();
        let want = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.numel() as f64;
        assert!((got - want).abs() < 1e-15);
        assert_eq!(perceptual_loss(&ex, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_toy_extractor_matches_independent_evaluation() {
        let mut r = rng(7);
        let a = Tensor4::seeded_normal(1, 3, 8, 8, 0.7, &mut r);
        let b = Tensor4::seeded_normal(1, 3, 8, 8, 0.7, &mut r);
        let ex = FeatureExtractor::toy(11);
        assert_eq!(ex.num_layers(), 5);
        let got = perceptual_loss(&ex, &a, &b).unwrap();
        // independent aggregation over the public feature lists
        let fa = ex.features(&a).unwrap();
        let fb = ex.features(&b).unwrap();
        assert_eq!(fa.len(), 5);
        let mut want = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let mut s = 0.0;
            for (u, v) in x.data().iter().zip(y.data()) {
                s += (u - v).abs();
            }
            want += s / x.numel() as f64;
        }
        assert!((got - want).abs() < 1e-12);
        assert!(got > 0.0);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut r = rng(8);
        let a = Tensor4::seeded_normal(1, 3, 6, 6, 0.6, &mut r);
        let b = Tensor4::seeded_normal(1, 3, 6, 6, 0.6, &mut r);
        let ex = FeatureExtractor::toy(13);
        let (_, grad) = perceptual_loss_grad(&ex, &a, &b).unwrap();
        let h = 1e-4;
        for i in 0..a.numel() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[i] += h;
            am.data_mut()[i] -= h;
            let fd = (perceptual_loss(&ex, &ap, &b).unwrap()
                - perceptual_loss(&ex, &am, &b).unwrap())
                / (2.0 * h);
            let an = grad.data()[i];
            // L1 kinks make a few entries non-smooth; compare loosely
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 2e-2, "entry {i}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn total_objective_arithmetic() {
        let parts = LossParts {
            gan: 1.0,
            fm: 2.0,
            percep: 3.0,
        };
        let w = LossWeights::default();
        assert_eq!(w.lambda_fm, 10.0);
        assert_eq!(w.lambda_percep, 10.0);
        assert_eq!(total_objective(parts, w), 51.0);
        let zero = LossWeights {
            lambda_fm: 0.0,
            lambda_percep: 0.0,
        };
        assert_eq!(total_objective(parts, zero), 1.0);
        assert!(LossWeights {
            lambda_fm: -1.0,
            lambda_percep: 0.0
        }
        .validate()
        .is_err());
    }
}
