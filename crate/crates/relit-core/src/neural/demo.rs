//! End-to-end training demo at toy scale: a small generator built from the
//! attention and Multi-SPADE blocks learns to brighten a fixed 16x16
//! synthetic pair against a 3-scale patch discriminator, optimizing the
//! adversarial, feature-matching, and perceptual terms jointly.
//!
//! This is a verification vehicle for the blocks and losses, not an
//! experiment; success means the non-adversarial components drop markedly
//! from their initial values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{RelitError, Result};
use crate::neural::attention::{attention_backward, attention_forward, AttentionBlock};
use crate::neural::losses::{
    feature_matching_grads, feature_matching_loss, gan_loss, gan_loss_grads,
    perceptual_loss_grad, total_objective, FeatureExtractor, LossParts, LossWeights,
};
use crate::neural::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, sigmoid_backward, sigmoid_forward,
    tanh_backward, tanh_forward, Conv2d,
};
use crate::neural::spade::{multi_spade_backward, multi_spade_forward, MultiSpadeBlock};
use crate::neural::tensor::Tensor4;

/// Which image the perceptual term compares the generated image against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerceptualAnchor {
    /// The degraded source image (the formulation as published).
    Input,
    /// The well-lit target; the coherent choice when every term should
    /// pull toward the same optimum, and the demo default.
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoConfig {
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub anchor: PerceptualAnchor,
    pub weights: LossWeights,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr_g: 4e-3,
            lr_d: 1e-3,
            seed: 0,
            anchor: PerceptualAnchor::Target,
            weights: LossWeights::default(),
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(RelitError::InvalidArgument(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss components observed during one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g_gan: f64,
    pub loss_fm: f64,
    pub loss_percep: f64,
    pub total_g: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoReport {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub history: Vec<DemoStep>,
}

fn default_schema_version() -> u32 {
    1
}

impl DemoReport {
    pub fn first(&self) -> &DemoStep {
        self.history.first().expect("non-empty history")
    }

    pub fn last(&self) -> &DemoStep {
        self.history.last().expect("non-empty history")
    }
}

const SIZE: usize = 16;
const FEAT_C: usize = 8;

/// Fixed 16x16 pair: a smooth colorful target and a darkened copy as the
/// degraded input. The guidance stands in for a relit render: the input
/// brightened back toward the target's level.
fn demo_data() -> (Tensor4, Tensor4, Tensor4) {
    let target = Tensor4::from_fn(1, 3, SIZE, SIZE, |_, c, y, x| {
        let fx = x as f64 / (SIZE - 1) as f64;
        let fy = y as f64 / (SIZE - 1) as f64;
        let phase = c as f64 / 3.0;
        0.55 + 0.3 * ((2.0 * std::f64::consts::PI * (fx + phase)).sin()
            * (std::f64::consts::PI * fy).cos())
    });
    let input = target.map(|v| 0.3 * v + 0.03);
    let guidance = input.map(|v| (2.6 * v).min(1.0));
    (input, target, guidance)
}

struct Generator {
    conv1: Conv2d,
    attn: AttentionBlock,
    spade: MultiSpadeBlock,
    conv2: Conv2d,
}

impl Generator {
    fn seeded(rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::seeded(3, FEAT_C, 3, 1, 1, rng),
            attn: AttentionBlock::seeded(3, FEAT_C, FEAT_C, rng),
            spade: MultiSpadeBlock::seeded(3, 3, FEAT_C, rng),
            conv2: Conv2d::seeded(FEAT_C, 3, 3, 1, 1, rng),
        }
    }
}

struct GenCache {
    z1: Tensor4,
    a1: Tensor4,
    f2: Tensor4,
    sp: Tensor4,
    z2: Tensor4,
    out: Tensor4,
}

fn gen_forward(g: &Generator, input: &Tensor4, guidance: &Tensor4) -> Result<GenCache> {
    let z1 = g.conv1.forward(input)?;
    let a1 = tanh_forward(&z1);
    let attn_out = attention_forward(&g.attn, &a1, guidance)?;
    let f2 = a1.add(&attn_out)?;
    let sp = multi_spade_forward(&g.spade, &f2, guidance, input)?;
    let z2 = g.conv2.forward(&sp)?;
    let out = sigmoid_forward(&z2);
    Ok(GenCache {
        z1,
        a1,
        f2,
        sp,
        z2,
        out,
    })
}

/// Gradient of the scalar objective with respect to every generator
/// parameter, given the gradient at the generator output.
struct GenGrads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    spade_w: Vec<Vec<f64>>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
}

fn gen_backward(
    g: &Generator,
    input: &Tensor4,
    guidance: &Tensor4,
    cache: &GenCache,
    d_out: &Tensor4,
) -> Result<GenGrads> {
    let d_z2 = sigmoid_backward(&cache.z2, d_out)?;
    let conv2_grads = g.conv2.backward(&cache.sp, &d_z2)?;
    let spade_grads =
        multi_spade_backward(&g.spade, &cache.f2, guidance, input, &conv2_grads.d_input)?;
    let attn_grads = attention_backward(&g.attn, &cache.a1, guidance, &spade_grads.d_feat)?;
    let d_a1 = spade_grads.d_feat.add(&attn_grads.d_feat_in)?;
    let d_z1 = tanh_backward(&cache.z1, &d_a1)?;
    let conv1_grads = g.conv1.backward(input, &d_z1)?;
    Ok(GenGrads {
        conv1_w: conv1_grads.d_weight,
        conv1_b: conv1_grads.d_bias,
        wq: attn_grads.d_w_q.as_slice().to_vec(),
        wk: attn_grads.d_w_k.as_slice().to_vec(),
        wv: attn_grads.d_w_v.as_slice().to_vec(),
        spade_w: vec![
            spade_grads.guided.d_eta_weight,
            spade_grads.guided.d_eta_bias,
            spade_grads.guided.d_phi_weight,
            spade_grads.guided.d_phi_bias,
            spade_grads.shaded.d_eta_weight,
            spade_grads.shaded.d_eta_bias,
            spade_grads.shaded.d_phi_weight,
            spade_grads.shaded.d_phi_bias,
        ],
        conv2_w: conv2_grads.d_weight,
        conv2_b: conv2_grads.d_bias,
    })
}

fn gen_param_chunks(g: &Generator) -> Vec<Vec<f64>> {
    vec![
        g.conv1.weight.clone(),
        g.conv1.bias.clone(),
        g.attn.w_q.as_slice().to_vec(),
        g.attn.w_k.as_slice().to_vec(),
        g.attn.w_v.as_slice().to_vec(),
        g.spade.guided.conv_eta.weight.clone(),
        g.spade.guided.conv_eta.bias.clone(),
        g.spade.guided.conv_phi.weight.clone(),
        g.spade.guided.conv_phi.bias.clone(),
        g.spade.shaded.conv_eta.weight.clone(),
        g.spade.shaded.conv_eta.bias.clone(),
        g.spade.shaded.conv_phi.weight.clone(),
        g.spade.shaded.conv_phi.bias.clone(),
        g.conv2.weight.clone(),
        g.conv2.bias.clone(),
    ]
}

fn gen_grad_chunks(gr: &GenGrads) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = vec![
        &gr.conv1_w,
        &gr.conv1_b,
        &gr.wq,
        &gr.wk,
        &gr.wv,
    ];
    for s in &gr.spade_w {
        v.push(s);
    }
    v.push(&gr.conv2_w);
    v.push(&gr.conv2_b);
    v
}

fn gen_write_params(g: &mut Generator, flat: &[f64]) {
    let mut pos = 0usize;
    let mut take = |len: usize| {
        let s = &flat[pos..pos + len];
        pos += len;
        s
    };
    let n = g.conv1.weight.len();
    g.conv1.weight.copy_from_slice(take(n));
    let n = g.conv1.bias.len();
    g.conv1.bias.copy_from_slice(take(n));
    let nq = g.attn.w_q.len();
    g.attn.w_q.as_mut_slice().copy_from_slice(take(nq));
    let nk = g.attn.w_k.len();
    g.attn.w_k.as_mut_slice().copy_from_slice(take(nk));
    let nv = g.attn.w_v.len();
    g.attn.w_v.as_mut_slice().copy_from_slice(take(nv));
    for conv in [
        &mut g.spade.guided.conv_eta,
        &mut g.spade.guided.conv_phi,
        &mut g.spade.shaded.conv_eta,
        &mut g.spade.shaded.conv_phi,
    ] {
        let nw = conv.weight.len();
        conv.weight.copy_from_slice(take(nw));
        let nb = conv.bias.len();
        conv.bias.copy_from_slice(take(nb));
    }
    let n = g.conv2.weight.len();
    g.conv2.weight.copy_from_slice(take(n));
    let n = g.conv2.bias.len();
    g.conv2.bias.copy_from_slice(take(n));
    debug_assert_eq!(pos, flat.len());
}

fn flatten(chunks: &[Vec<f64>]) -> Vec<f64> {
    chunks.iter().flat_map(|c| c.iter().copied()).collect()
}

fn flatten_refs(chunks: &[&[f64]]) -> Vec<f64> {
    chunks.iter().flat_map(|c| c.iter().copied()).collect()
}

const D_SCALES: usize = 3;

struct Discriminator {
    // per scale: 3->6 stride 2, 6->6, 6->1
    conv_a: Vec<Conv2d>,
    conv_b: Vec<Conv2d>,
    conv_c: Vec<Conv2d>,
}

impl Discriminator {
    fn seeded(rng: &mut ChaCha8Rng) -> Self {
        let mut conv_a = Vec::new();
        let mut conv_b = Vec::new();
        let mut conv_c = Vec::new();
        for _ in 0..D_SCALES {
            conv_a.push(Conv2d::seeded(3, 6, 3, 2, 1, rng));
            conv_b.push(Conv2d::seeded(6, 6, 3, 1, 1, rng));
            conv_c.push(Conv2d::seeded(6, 1, 3, 1, 1, rng));
        }
        Self {
            conv_a,
            conv_b,
            conv_c,
        }
    }
}

struct ScaleCache {
    pooled: Tensor4,
    z_a: Tensor4,
    t_a: Tensor4,
    z_b: Tensor4,
    t_b: Tensor4,
    z_c: Tensor4,
    prob: Tensor4,
}

fn disc_forward(d: &Discriminator, image: &Tensor4) -> Result<Vec<ScaleCache>> {
    let mut scales = Vec::with_capacity(D_SCALES);
    for k in 0..D_SCALES {
        let side = SIZE >> k;
        let pooled = adaptive_avg_pool(image, side, side)?;
        let z_a = d.conv_a[k].forward(&pooled)?;
        let t_a = tanh_forward(&z_a);
        let z_b = d.conv_b[k].forward(&t_a)?;
        let t_b = tanh_forward(&z_b);
        let z_c = d.conv_c[k].forward(&t_b)?;
        let prob = sigmoid_forward(&z_c);
        scales.push(ScaleCache {
            pooled,
            z_a,
            t_a,
            z_b,
            t_b,
            z_c,
            prob,
        });
    }
    Ok(scales)
}

fn probs(scales: &[ScaleCache]) -> Vec<Tensor4> {
    scales.iter().map(|s| s.prob.clone()).collect()
}

/// Feature taps per scale (two per scale, in scale order).
fn taps(scales: &[ScaleCache]) -> Vec<Tensor4> {
    scales
        .iter()
        .flat_map(|s| [s.t_a.clone(), s.t_b.clone()])
        .collect()
}

#[derive(Default)]
struct DiscGrads {
    conv_a: Vec<(Vec<f64>, Vec<f64>)>,
    conv_b: Vec<(Vec<f64>, Vec<f64>)>,
    conv_c: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DiscGrads {
    fn zeros(d: &Discriminator) -> Self {
        let z = |convs: &[Conv2d]| {
            convs
                .iter()
                .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
                .collect()
        };
        Self {
            conv_a: z(&d.conv_a),
            conv_b: z(&d.conv_b),
            conv_c: z(&d.conv_c),
        }
    }

    fn add_assign(&mut self, other: &DiscGrads) {
        let merge = |dst: &mut Vec<(Vec<f64>, Vec<f64>)>, src: &Vec<(Vec<f64>, Vec<f64>)>| {
            for (d, s) in dst.iter_mut().zip(src) {
                for (x, y) in d.0.iter_mut().zip(&s.0) {
                    *x += y;
                }
                for (x, y) in d.1.iter_mut().zip(&s.1) {
                    *x += y;
                }
            }
        };
        merge(&mut self.conv_a, &other.conv_a);
        merge(&mut self.conv_b, &other.conv_b);
        merge(&mut self.conv_c, &other.conv_c);
    }
}

/// Backpropagate through one discriminator pass.
///
/// `d_probs` is the upstream gradient on each scale's probability map;
/// `tap_grads`, when present, injects gradients at the two feature taps
/// per scale (feature-matching path). Returns parameter gradients and the
/// gradient with respect to the input image.
fn disc_backward(
    d: &Discriminator,
    image: &Tensor4,
    scales: &[ScaleCache],
    d_probs: &[Tensor4],
    tap_grads: Option<&[Tensor4]>,
) -> Result<(DiscGrads, Tensor4)> {
    let mut grads = DiscGrads::zeros(d);
    let (n, c, h, w) = image.dims();
    let mut d_image = Tensor4::zeros(n, c, h, w);
    for k in 0..D_SCALES {
        let sc = &scales[k];
        let d_zc = sigmoid_backward(&sc.z_c, &d_probs[k])?;
        let c_grads = d.conv_c[k].backward(&sc.t_b, &d_zc)?;
        grads.conv_c[k].0 = c_grads.d_weight;
        grads.conv_c[k].1 = c_grads.d_bias;

        let mut d_tb = c_grads.d_input;
        if let Some(tg) = tap_grads {
            d_tb = d_tb.add(&tg[2 * k + 1])?;
        }
        let d_zb = tanh_backward(&sc.z_b, &d_tb)?;
        let b_grads = d.conv_b[k].backward(&sc.t_a, &d_zb)?;
        grads.conv_b[k].0 = b_grads.d_weight;
        grads.conv_b[k].1 = b_grads.d_bias;

        let mut d_ta = b_grads.d_input;
        if let Some(tg) = tap_grads {
            d_ta = d_ta.add(&tg[2 * k])?;
        }
        let d_za = tanh_backward(&sc.z_a, &d_ta)?;
        let a_grads = d.conv_a[k].backward(&sc.pooled, &d_za)?;
        grads.conv_a[k].0 = a_grads.d_weight;
        grads.conv_a[k].1 = a_grads.d_bias;

        let d_pooled = a_grads.d_input;
        let back = if sc.pooled.dims() == image.dims() {
            d_pooled
        } else {
            adaptive_avg_pool_backward(image, &d_pooled)?
        };
        d_image = d_image.add(&back)?;
    }
    Ok((grads, d_image))
}

fn disc_param_chunks(d: &Discriminator) -> Vec<Vec<f64>> {
    let mut v = Vec::new();
    for k in 0..D_SCALES {
        for conv in [&d.conv_a[k], &d.conv_b[k], &d.conv_c[k]] {
            v.push(conv.weight.clone());
            v.push(conv.bias.clone());
        }
    }
    v
}

fn disc_grad_flat(g: &DiscGrads) -> Vec<f64> {
    let mut v = Vec::new();
    for k in 0..D_SCALES {
        for pair in [&g.conv_a[k], &g.conv_b[k], &g.conv_c[k]] {
            v.extend_from_slice(&pair.0);
            v.extend_from_slice(&pair.1);
        }
    }
    v
}

fn disc_write_params(d: &mut Discriminator, flat: &[f64]) {
    let mut pos = 0usize;
    for k in 0..D_SCALES {
        let convs: [&mut Conv2d; 3] = [&mut d.conv_a[k], &mut d.conv_b[k], &mut d.conv_c[k]];
        for conv in convs {
            let nw = conv.weight.len();
            conv.weight.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = conv.bias.len();
            conv.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
    }
    debug_assert_eq!(pos, flat.len());
}

/// Alternating-step adversarial training on the fixed pair; deterministic
/// for a given seed. Returns the per-step loss component history.
pub fn demo_train(cfg: &DemoConfig) -> Result<DemoReport> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Err(RelitError::InvalidArgument("demo needs at least 1 step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (input, target, guidance) = demo_data();
    let mut gen = Generator::seeded(&mut rng);
    let mut disc = Discriminator::seeded(&mut rng);
    let extractor = FeatureExtractor::toy(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let anchor_img = match cfg.anchor {
        PerceptualAnchor::Input => input.clone(),
        PerceptualAnchor::Target => target.clone(),
    };

    let g_len: usize = gen_param_chunks(&gen).iter().map(|c| c.len()).sum();
    let d_len: usize = disc_param_chunks(&disc).iter().map(|c| c.len()).sum();
    let mut adam_g = Adam::new(g_len, cfg.lr_g);
    let mut adam_d = Adam::new(d_len, cfg.lr_d);

    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // discriminator step; the generator output is treated as constant
        let fake = gen_forward(&gen, &input, &guidance)?.out;
        let real_scales = disc_forward(&disc, &target)?;
        let fake_scales = disc_forward(&disc, &fake)?;
        let (loss_d, _) = gan_loss(&probs(&real_scales), &probs(&fake_scales));
        let (g_real, g_fake_d, _) = gan_loss_grads(&probs(&real_scales), &probs(&fake_scales));
        let (mut d_grads, _) = disc_backward(&disc, &target, &real_scales, &g_real, None)?;
        let (fake_side, _) = disc_backward(&disc, &fake, &fake_scales, &g_fake_d, None)?;
        d_grads.add_assign(&fake_side);
        let mut d_params = flatten(&disc_param_chunks(&disc));
        adam_d.step(&mut d_params, &disc_grad_flat(&d_grads))?;
        disc_write_params(&mut disc, &d_params);

        // generator step against the updated discriminator
        let cache = gen_forward(&gen, &input, &guidance)?;
        let real_scales = disc_forward(&disc, &target)?;
        let fake_scales = disc_forward(&disc, &cache.out)?;
        let real_probs = probs(&real_scales);
        let fake_probs = probs(&fake_scales);
        let (_, loss_g_gan) = gan_loss(&real_probs, &fake_probs);
        let (_, _, g_fake_g) = gan_loss_grads(&real_probs, &fake_probs);

        let real_taps = taps(&real_scales);
        let fake_taps = taps(&fake_scales);
        let loss_fm = feature_matching_loss(&real_taps, &fake_taps)?;
        let fm_taps = feature_matching_grads(&real_taps, &fake_taps)?;
        let fm_taps_weighted: Vec<Tensor4> = fm_taps
            .iter()
            .map(|t| t.map(|v| cfg.weights.lambda_fm * v))
            .collect();

        let (loss_percep, percep_grad) = perceptual_loss_grad(&extractor, &cache.out, &anchor_img)?;

        let (_, d_fake) = disc_backward(
            &disc,
            &cache.out,
            &fake_scales,
            &g_fake_g,
            Some(&fm_taps_weighted),
        )?;
        let d_out = d_fake.zip_map(&percep_grad, |a, p| a + cfg.weights.lambda_percep * p)?;

        let g_grads = gen_backward(&gen, &input, &guidance, &cache, &d_out)?;
        let mut g_params = flatten(&gen_param_chunks(&gen));
        adam_g.step(&mut g_params, &flatten_refs(&gen_grad_chunks(&g_grads)))?;
        gen_write_params(&mut gen, &g_params);

        let total_g = total_objective(
            LossParts {
                gan: loss_g_gan,
                fm: loss_fm,
                percep: loss_percep,
            },
            cfg.weights,
        );
        history.push(DemoStep {
            step,
            loss_d,
            loss_g_gan,
            loss_fm,
            loss_percep,
            total_g,
        });
    }
    Ok(DemoReport {
        schema_version: 1,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_is_deterministic() {
        let cfg = DemoConfig {
            steps: 6,
            ..DemoConfig::default()
        };
        let a = demo_train(&cfg).unwrap();
        let b = demo_train(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.first().step, 0);
        assert_eq!(a.last().step, 5);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = DemoConfig {
            steps: 2,
            ..DemoConfig::default()
        };
        let a = demo_train(&cfg).unwrap();
        let b = demo_train(&DemoConfig {
            seed: 1,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(a.history[0].loss_fm, b.history[0].loss_fm);
    }

    #[test]
    fn short_run_reduces_reconstruction_terms() {
        let cfg = DemoConfig {
            steps: 60,
            ..DemoConfig::default()
        };
        let report = demo_train(&cfg).unwrap();
        let first = report.first();
        let last = report.last();
        assert!(
            last.loss_percep < first.loss_percep,
            "percep {} -> {}",
            first.loss_percep,
            last.loss_percep
        );
        assert!(
            last.loss_fm < first.loss_fm,
            "fm {} -> {}",
            first.loss_fm,
            last.loss_fm
        );
        assert!(report.history.iter().all(|s| s.total_g.is_finite() && s.loss_d.is_finite()));
    }

    #[test]
    fn anchor_switch_changes_the_objective() {
        let cfg = DemoConfig {
            steps: 1,
            ..DemoConfig::default()
        };
        let t = demo_train(&cfg).unwrap();
        let i = demo_train(&DemoConfig {
            anchor: PerceptualAnchor::Input,
            ..cfg
        })
        .unwrap();
        assert_ne!(t.history[0].loss_percep, i.history[0].loss_percep);
    }

    #[test]
    fn config_validation() {
        assert!(DemoConfig {
            lr_g: 0.0,
            ..DemoConfig::default()
        }
        .validate()
        .is_err());
        assert!(demo_train(&DemoConfig {
            steps: 0,
            ..DemoConfig::default()
        })
        .is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let cfg = DemoConfig {
            steps: 2,
            ..DemoConfig::default()
        };
        let report = demo_train(&cfg).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let back: DemoReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.history, report.history);
    }
}
