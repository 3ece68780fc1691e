//! Bi-branch lighting correction by direct gradient descent through the
//! soft rasterizer.
//!
//! Two coefficient sets are optimized jointly: `eps_est` must re-render the
//! observed input image, and `eps_est + delta_sh` (the corrected lighting,
//! never stored separately) must re-render the well-lit target. Each branch
//! gets an L1 image term, combined as `term_est + lambda_crt * term_crt`.
//! The render of the corrected branch is the guidance image.
//!
//! Losses are means over covered pixels and channels. The L1 subgradient
//! at zero is taken as 0, and gradients are blocked where the render
//! clamped at 1.

use crate::adam::Adam;
use crate::error::{RelitError, Result};
use crate::img::{PixelMask, RasterImage};
use crate::morphable::Mesh;
use crate::raster::{render_geometry, render_with_gradients, RasterConfig, RenderOutput};
use crate::sh::{estimate_sh, ShCoeffs, ShDelta, SH_COUNT};
use serde::{Deserialize, Serialize};

/// Optimizer settings for the lighting fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    /// Weight of the corrected-branch term; 0 disables it.
    pub lambda_crt: f64,
    /// Number of optimizer updates; 0 evaluates the initialization only.
    pub steps: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Reserved for stochastic extensions; the fit itself draws no randomness.
    pub seed: u64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            lambda_crt: 1.0,
            steps: 400,
            step_size: 0.05,
            adam_beta1: 0.95,
            adam_beta2: 0.90,
            seed: 0,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_crt.is_finite() || self.lambda_crt < 0.0 {
            return Err(RelitError::InvalidArgument(format!(
                "lambda_crt must be finite and >= 0, got {}",
                self.lambda_crt
            )));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(RelitError::InvalidArgument(format!(
                "step_size must be finite and > 0, got {}",
                self.step_size
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(RelitError::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// One loss-history row, recorded before the update at `step`; the entry at
/// `step == steps` holds the final loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: usize,
    pub total: f64,
    pub term_est: f64,
    pub term_crt: f64,
}

/// Result of the bi-branch fit.
#[derive(Debug, Clone)]
pub struct CorrectionState {
    pub eps_est: ShCoeffs,
    pub delta_sh: ShDelta,
    pub loss_history: Vec<LossEntry>,
}

impl CorrectionState {
    /// The corrected lighting, always derived as `eps_est + delta_sh`.
    pub fn eps_crt(&self) -> ShCoeffs {
        self.eps_est.add_delta(&self.delta_sh)
    }
}

/// Single-coefficient fit used by the ablation harness.
#[derive(Debug, Clone)]
pub struct SingleBranchResult {
    pub coeffs: ShCoeffs,
    /// `term_est` carries the (only) image term; `term_crt` is always 0.
    pub loss_history: Vec<LossEntry>,
}

/// Masked per-pixel-per-channel L1 between a render and a target image,
/// plus its gradient with respect to that render's 27 lighting entries.
///
/// The mean runs over `3 * mask.count()` values. Gradients pass only where
/// the aggregated color stayed below the clamp.
fn l1_term(out: &RenderOutput, target: &RasterImage, mask: &PixelMask) -> (f64, [f64; 27]) {
    let n = (3 * mask.count()) as f64;
    let mut loss = 0.0;
    let mut grad = [0.0f64; 27];
    for y in 0..target.height() {
        for x in 0..target.width() {
            if !mask.get(x, y) {
                continue;
            }
            let rendered = out.image.pixel(x, y);
            let raw = out.unclamped_at(x, y);
            let want = target.pixel(x, y);
            for c in 0..3 {
                let diff = rendered[c] - want[c];
                loss += diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                if sign != 0.0 && raw[c] < 1.0 {
                    let d = out.d_sh_at(x, y, c).expect("gradients requested");
                    for k in 0..SH_COUNT {
                        grad[c * SH_COUNT + k] += sign * d[k];
                    }
                }
            }
        }
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    (loss, grad)
}

fn check_sizes(cfg_raster: &RasterConfig, images: &[&RasterImage]) -> Result<()> {
    for img in images {
        if img.width() != cfg_raster.camera.width || img.height() != cfg_raster.camera.height {
            return Err(RelitError::DimensionMismatch(format!(
                "image is {}x{}, render target is {}x{}",
                img.width(),
                img.height(),
                cfg_raster.camera.width,
                cfg_raster.camera.height
            )));
        }
    }
    Ok(())
}

fn covered_mask(mesh: &Mesh, cfg_raster: &RasterConfig) -> Result<(PixelMask, crate::raster::GeometryBuffers)> {
    let geom = render_geometry(mesh, cfg_raster)?;
    let mask = geom.coverage_mask(0.5);
    if mask.count() == 0 {
        return Err(RelitError::InvalidArgument(
            "no pixel reaches 0.5 coverage; nothing to fit".into(),
        ));
    }
    Ok((mask, geom))
}

/// Evaluate the two-branch loss at a given state without optimizing.
///
/// `term_est` compares the render under `eps_est` with `i_s`; `term_crt`
/// compares the render under `eps_est + delta_sh` with `i_t` (0 when `i_t`
/// is absent); `total = term_est + lambda_crt * term_crt`.
pub fn correction_loss(
    mesh: &Mesh,
    cfg_raster: &RasterConfig,
    state: &CorrectionState,
    i_s: &RasterImage,
    i_t: Option<&RasterImage>,
    lambda_crt: f64,
) -> Result<(f64, f64, f64)> {
    check_sizes(cfg_raster, &[i_s])?;
    if let Some(t) = i_t {
        check_sizes(cfg_raster, &[t])?;
    }
    let (mask, _) = covered_mask(mesh, cfg_raster)?;
    let out_est = render_with_gradients(mesh, &state.eps_est, cfg_raster)?;
    let (term_est, _) = l1_term(&out_est, i_s, &mask);
    let term_crt = match i_t {
        Some(target) => {
            let out_crt = render_with_gradients(mesh, &state.eps_crt(), cfg_raster)?;
            l1_term(&out_crt, target, &mask).0
        }
        None => 0.0,
    };
    Ok((term_est + lambda_crt * term_crt, term_est, term_crt))
}

fn attach_step(err: RelitError, step: usize) -> RelitError {
    match err {
        RelitError::NonFinite { detail, .. } => RelitError::NonFinite { step, detail },
        other => other,
    }
}

/// Fit `eps_est` and `delta_sh` with Adam.
///
/// `eps_est` starts from a least-squares lighting estimate on `i_s` (mean
/// brightness fallback when the geometry cannot support the estimate);
/// `delta_sh` starts at zero. The loss history has `steps + 1` entries.
pub fn fit_lighting(
    mesh: &Mesh,
    cfg_raster: &RasterConfig,
    i_s: &RasterImage,
    i_t: Option<&RasterImage>,
    cfg: &CorrectionConfig,
) -> Result<CorrectionState> {
    cfg.validate()?;
    check_sizes(cfg_raster, &[i_s])?;
    if let Some(t) = i_t {
        check_sizes(cfg_raster, &[t])?;
    }
    let (mask, geom) = covered_mask(mesh, cfg_raster)?;

    let init = match estimate_sh(i_s, &geom.normals, &mask, Some(&geom.albedo)) {
        Ok(sh) => sh,
        Err(RelitError::RankDeficient(why)) => {
            log::debug!("lighting estimate fell back to ambient: {why}");
            ShCoeffs::ambient(i_s.masked_mean_luma(&mask).max(0.05))
        }
        Err(e) => return Err(e),
    };

    let mut params = [0.0f64; 54];
    params[..27].copy_from_slice(&init.to_flat());
    let mut adam = Adam::new(54, cfg.step_size).with_betas(cfg.adam_beta1, cfg.adam_beta2);
    let mut history = Vec::with_capacity(cfg.steps + 1);

    let eval = |params: &[f64; 54], step: usize| -> Result<(LossEntry, [f64; 54])> {
        let eps_est = ShCoeffs::from_flat(params[..27].try_into().expect("27 entries"));
        let delta: [f64; 27] = params[27..].try_into().expect("27 entries");
        let out_est =
            render_with_gradients(mesh, &eps_est, cfg_raster).map_err(|e| attach_step(e, step))?;
        let (term_est, g_est) = l1_term(&out_est, i_s, &mask);

        let mut term_crt = 0.0;
        let mut g_crt = [0.0f64; 27];
        if let Some(target) = i_t {
            let mut crt_flat = [0.0f64; 27];
            for i in 0..27 {
                crt_flat[i] = params[i] + delta[i];
            }
            let eps_crt = ShCoeffs::from_flat(&crt_flat);
            let out_crt = render_with_gradients(mesh, &eps_crt, cfg_raster)
                .map_err(|e| attach_step(e, step))?;
            let (t, g) = l1_term(&out_crt, target, &mask);
            term_crt = t;
            g_crt = g;
        }

        let total = term_est + cfg.lambda_crt * term_crt;
        if !total.is_finite() {
            return Err(RelitError::NonFinite {
                step,
                detail: "correction loss".into(),
            });
        }
        let mut grads = [0.0f64; 54];
        for i in 0..27 {
            grads[i] = g_est[i];
            if cfg.lambda_crt > 0.0 {
                grads[i] += cfg.lambda_crt * g_crt[i];
                grads[27 + i] = cfg.lambda_crt * g_crt[i];
            }
        }
        let entry = LossEntry {
            step,
            total,
            term_est,
            term_crt,
        };
        Ok((entry, grads))
    };

    for step in 0..cfg.steps {
        let (entry, grads) = eval(&params, step)?;
        history.push(entry);
        adam.step(&mut params, &grads)?;
    }
    let (final_entry, _) = eval(&params, cfg.steps)?;
    history.push(final_entry);

    Ok(CorrectionState {
        eps_est: ShCoeffs::from_flat(params[..27].try_into().expect("27 entries")),
        delta_sh: ShDelta {
            delta: ShCoeffs::from_flat(params[27..].try_into().expect("27 entries")).channels,
        },
        loss_history: history,
    })
}

/// Ablation baseline: fit one coefficient set directly against the target,
/// without the estimation branch. Starts from a flat ambient guess at the
/// target's mean brightness.
pub fn single_branch_fit(
    mesh: &Mesh,
    cfg_raster: &RasterConfig,
    i_t: &RasterImage,
    cfg: &CorrectionConfig,
) -> Result<SingleBranchResult> {
    cfg.validate()?;
    check_sizes(cfg_raster, &[i_t])?;
    let (mask, _) = covered_mask(mesh, cfg_raster)?;

    let init = ShCoeffs::ambient(i_t.masked_mean_luma(&mask).max(0.05));
    let mut params: [f64; 27] = init.to_flat();
    let mut adam = Adam::new(27, cfg.step_size).with_betas(cfg.adam_beta1, cfg.adam_beta2);
    let mut history = Vec::with_capacity(cfg.steps + 1);

    let eval = |params: &[f64; 27], step: usize| -> Result<(LossEntry, [f64; 27])> {
        let sh = ShCoeffs::from_flat(params);
        let out =
            render_with_gradients(mesh, &sh, cfg_raster).map_err(|e| attach_step(e, step))?;
        let (loss, grad) = l1_term(&out, i_t, &mask);
        if !loss.is_finite() {
            return Err(RelitError::NonFinite {
                step,
                detail: "single-branch loss".into(),
            });
        }
        Ok((
            LossEntry {
                step,
                total: loss,
                term_est: loss,
                term_crt: 0.0,
            },
            grad,
        ))
    };

    for step in 0..cfg.steps {
        let (entry, grads) = eval(&params, step)?;
        history.push(entry);
        adam.step(&mut params, &grads)?;
    }
    let (final_entry, _) = eval(&params, cfg.steps)?;
    history.push(final_entry);

    Ok(SingleBranchResult {
        coeffs: ShCoeffs::from_flat(&params),
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{make_synthetic_model, FaceCoefficients};
    use crate::raster::{render, Camera};

    fn fixture(size: usize) -> (Mesh, RasterConfig) {
        let model = make_synthetic_model(10, 21);
        let mesh = model.evaluate(&FaceCoefficients::zeros(4, 3, 3)).unwrap();
        let cfg = RasterConfig::new(Camera::orthographic(size, size));
        (mesh, cfg)
    }

    fn mild_sh(k: f64) -> ShCoeffs {
        ShCoeffs::new([
            [1.6 * k, 0.1, 0.35, 0.05, 0.0, 0.0, 0.02, 0.0, 0.0],
            [1.5 * k, 0.0, 0.30, 0.10, 0.0, 0.0, 0.0, 0.0, 0.0],
            [1.4 * k, 0.05, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ])
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let (mesh, cfg) = fixture(24);
        let sh_in = mild_sh(1.0);
        let sh_tgt = mild_sh(1.2);
        let i_s = render(&mesh, &sh_in, &cfg).unwrap().image;
        let i_t = render(&mesh, &sh_tgt, &cfg).unwrap().image;
        let state = CorrectionState {
            eps_est: sh_in.clone(),
            delta_sh: sh_tgt.sub(&sh_in),
            loss_history: vec![],
        };
        let (total, est, crt) = correction_loss(&mesh, &cfg, &state, &i_s, Some(&i_t), 1.0).unwrap();
        assert!(est < 1e-12, "term_est = {est}");
        assert!(crt < 1e-12, "term_crt = {crt}");
        assert!(total < 1e-12, "total = {total}");
    }

    #[test]
    fn lambda_zero_ignores_target_term() {
        let (mesh, cfg) = fixture(16);
        let sh_in = mild_sh(1.0);
        let i_s = render(&mesh, &sh_in, &cfg).unwrap().image;
        let wrong_target = RasterImage::filled(16, 16, [1.0, 1.0, 1.0]);
        let state = CorrectionState {
            eps_est: sh_in,
            delta_sh: ShDelta::zeros(),
            loss_history: vec![],
        };
        let (total, est, crt) =
            correction_loss(&mesh, &cfg, &state, &i_s, Some(&wrong_target), 0.0).unwrap();
        assert!(crt > 0.0);
        assert_eq!(total, est);
    }

    #[test]
    fn half_offset_in_one_channel_gives_one_sixth() {
        // Mean over pixels and channels: 0.5 in one channel of three.
        let (mesh, cfg) = fixture(16);
        let sh_in = mild_sh(0.8);
        let i_s = render(&mesh, &sh_in, &cfg).unwrap().image;
        let mask = render_geometry(&mesh, &cfg)
            .unwrap()
            .coverage_mask(0.5);
        let mut shifted = i_s.clone();
        for y in 0..16 {
            for x in 0..16 {
                if mask.get(x, y) {
                    let mut p = i_s.pixel(x, y);
                    p[1] = (p[1] + 0.5).min(1.0);
                    shifted.set_pixel(x, y, p);
                }
            }
        }
        // keep the example exact: only count pixels where the +0.5 did not clip
        let clipped = (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).any(|(x, y)| {
            mask.get(x, y) && i_s.pixel(x, y)[1] > 0.5
        });
        assert!(!clipped, "fixture must stay below 0.5 in green");
        let state = CorrectionState {
            eps_est: sh_in,
            delta_sh: ShDelta::zeros(),
            loss_history: vec![],
        };
        let (_, est, _) = correction_loss(&mesh, &cfg, &state, &shifted, None, 1.0).unwrap();
        assert!((est - 0.5 / 3.0).abs() < 1e-12, "term_est = {est}");
    }

    #[test]
    fn guidance_equals_render_at_explicit_sum() {
        let (mesh, cfg) = fixture(16);
        let state = CorrectionState {
            eps_est: mild_sh(1.0),
            delta_sh: mild_sh(0.3).sub(&ShCoeffs::zeros()),
            loss_history: vec![],
        };
        let via_state = render(&mesh, &state.eps_crt(), &cfg).unwrap();
        let mut explicit = state.eps_est.clone();
        for c in 0..3 {
            for k in 0..SH_COUNT {
                explicit.channels[c][k] += state.delta_sh.delta[c][k];
            }
        }
        let via_sum = render(&mesh, &explicit, &cfg).unwrap();
        assert_eq!(via_state.unclamped, via_sum.unclamped);
    }

    #[test]
    fn fit_recovers_lighting_pair() {
        let (mesh, cfg) = fixture(32);
        let sh_in = mild_sh(0.9);
        let sh_tgt = mild_sh(1.25);
        let i_s = render(&mesh, &sh_in, &cfg).unwrap().image;
        let i_t = render(&mesh, &sh_tgt, &cfg).unwrap().image;
        let ccfg = CorrectionConfig {
            steps: 800,
            step_size: 0.02,
            ..CorrectionConfig::default()
        };
        let state = fit_lighting(&mesh, &cfg, &i_s, Some(&i_t), &ccfg).unwrap();
        assert!(
            state.eps_est.linf_distance(&sh_in) < 5e-2,
            "eps_est off by {}",
            state.eps_est.linf_distance(&sh_in)
        );
        assert!(
            state.eps_crt().linf_distance(&sh_tgt) < 5e-2,
            "eps_crt off by {}",
            state.eps_crt().linf_distance(&sh_tgt)
        );
        let last = state.loss_history.last().unwrap();
        let first = &state.loss_history[0];
        assert!(last.total <= first.total);
        assert_eq!(state.loss_history.len(), ccfg.steps + 1);
    }

    #[test]
    fn identical_target_drives_delta_to_zero() {
        let (mesh, cfg) = fixture(24);
        let sh_in = mild_sh(1.0);
        let i_s = render(&mesh, &sh_in, &cfg).unwrap().image;
        let ccfg = CorrectionConfig {
            steps: 300,
            step_size: 0.02,
            ..CorrectionConfig::default()
        };
        let state = fit_lighting(&mesh, &cfg, &i_s, Some(&i_s), &ccfg).unwrap();
        assert!(
            state.delta_sh.linf_norm() < 1e-2,
            "delta stayed at {}",
            state.delta_sh.linf_norm()
        );
    }

    #[test]
    fn lambda_zero_trajectory_ignores_target_presence() {
        let (mesh, cfg) = fixture(16);
        let sh_in = mild_sh(1.0);
        let i_s = render(&mesh, &sh_in, &cfg).unwrap().image;
        let i_t = render(&mesh, &mild_sh(1.4), &cfg).unwrap().image;
        let ccfg = CorrectionConfig {
            lambda_crt: 0.0,
            steps: 50,
            ..CorrectionConfig::default()
        };
        let with_target = fit_lighting(&mesh, &cfg, &i_s, Some(&i_t), &ccfg).unwrap();
        let without = fit_lighting(&mesh, &cfg, &i_s, None, &ccfg).unwrap();
        assert_eq!(
            with_target.eps_est.channels, without.eps_est.channels,
            "estimation branch must not depend on the target when lambda is 0"
        );
        for (a, b) in with_target
            .loss_history
            .iter()
            .zip(without.loss_history.iter())
        {
            assert_eq!(a.term_est, b.term_est);
        }
    }

    #[test]
    fn single_branch_recovers_target_lighting() {
        let (mesh, cfg) = fixture(32);
        let sh_tgt = mild_sh(1.1);
        let i_t = render(&mesh, &sh_tgt, &cfg).unwrap().image;
        let ccfg = CorrectionConfig {
            steps: 800,
            step_size: 0.02,
            ..CorrectionConfig::default()
        };
        let fit = single_branch_fit(&mesh, &cfg, &i_t, &ccfg).unwrap();
        assert!(
            fit.coeffs.linf_distance(&sh_tgt) < 5e-2,
            "off by {}",
            fit.coeffs.linf_distance(&sh_tgt)
        );
    }

    #[test]
    fn single_branch_is_deterministic() {
        let (mesh, cfg) = fixture(16);
        let i_t = render(&mesh, &mild_sh(1.0), &cfg).unwrap().image;
        let ccfg = CorrectionConfig {
            steps: 40,
            ..CorrectionConfig::default()
        };
        let a = single_branch_fit(&mesh, &cfg, &i_t, &ccfg).unwrap();
        let b = single_branch_fit(&mesh, &cfg, &i_t, &ccfg).unwrap();
        assert_eq!(a.coeffs.channels, b.coeffs.channels);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn zero_coverage_is_rejected() {
        let model = make_synthetic_model(10, 21);
        let mut coeffs = FaceCoefficients::zeros(4, 3, 3);
        coeffs.pose.translation.x = 1000.0; // projects far outside the frame
        let mesh = model.evaluate(&coeffs).unwrap();
        let cfg = RasterConfig::new(Camera::orthographic(16, 16));
        let i = RasterImage::filled(16, 16, [0.5; 3]);
        let ccfg = CorrectionConfig {
            steps: 1,
            ..CorrectionConfig::default()
        };
        let result = fit_lighting(&mesh, &cfg, &i, None, &ccfg);
        assert!(result.is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (mesh, cfg) = fixture(16);
        let i_s = render(&mesh, &mild_sh(1.0), &cfg).unwrap().image;
        let ccfg = CorrectionConfig {
            steps: 0,
            ..CorrectionConfig::default()
        };
        let state = fit_lighting(&mesh, &cfg, &i_s, None, &ccfg).unwrap();
        assert_eq!(state.loss_history.len(), 1);
        assert_eq!(state.delta_sh.linf_norm(), 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let cfg = CorrectionConfig {
            lambda_crt: -1.0,
            ..CorrectionConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CorrectionConfig {
            step_size: 0.0,
            ..CorrectionConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CorrectionConfig {
            adam_beta2: 1.0,
            ..CorrectionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
