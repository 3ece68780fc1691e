//! Training-pair synthesis: extrapolate lighting away from an ideal point,
//! reshade the target image into a degraded input, and add
//! darkness-correlated blur and noise.
//!
//! The extrapolation is `sh_input = sh_target + lambda * (sh_target -
//! ideal)`, with `lambda` drawn from `[1, 2]` and the ideal point drawn
//! uniformly from a small ball around the dataset-mean lighting, so inputs
//! always sit further from good lighting than their targets. Degradation
//! strength tracks `1 - shading`: darker regions blur and noise more.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RelitError, Result};
use crate::img::{RasterImage, ScalarMap};
use crate::morphable::{FaceCoefficients, MorphableModel};
use crate::raster::{render, render_geometry, Camera, NormalMap, RasterConfig};
use crate::sh::{shade, ShCoeffs, SH_COUNT};

/// Pairs whose masked mean brightness falls below this are discarded by the
/// dataset filter (stand-in for manual screening).
pub const MIN_PAIR_BRIGHTNESS: f64 = 0.02;

/// Degradation sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    /// Extrapolation factor range `[lo, hi]`.
    pub lambda_sh_range: [f64; 2],
    /// Radius of the ball around the mean from which the ideal point is drawn.
    pub ideal_radius: f64,
    /// Blur sigma in pixels at zero shading.
    pub blur_max_sigma: f64,
    /// Additive noise sigma at zero shading.
    pub noise_max_sigma: f64,
    pub seed: u64,
}

impl DegradeConfig {
    /// Defaults: lambda in `[1, 2]`, ideal radius at 10% of the mean's norm,
    /// up to 2 px of blur and 0.05 of noise.
    pub fn for_mean(mean: &ShCoeffs, seed: u64) -> Self {
        Self {
            lambda_sh_range: [1.0, 2.0],
            ideal_radius: 0.1 * mean.l2_norm(),
            blur_max_sigma: 2.0,
            noise_max_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.lambda_sh_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
            return Err(RelitError::InvalidArgument(format!(
                "lambda range [{lo}, {hi}] must satisfy 0 <= lo <= hi"
            )));
        }
        for (name, v) in [
            ("ideal_radius", self.ideal_radius),
            ("blur_max_sigma", self.blur_max_sigma),
            ("noise_max_sigma", self.noise_max_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(RelitError::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Audit record stored with every synthesized pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub config: DegradeConfig,
    pub lambda_used: f64,
    pub ideal_point: ShCoeffs,
}

fn default_schema_version() -> u32 {
    1
}

/// One (degraded input, well-lit target) training pair.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub input_image: RasterImage,
    pub target_image: RasterImage,
    pub sh_input: ShCoeffs,
    pub sh_target: ShCoeffs,
    pub provenance: PairProvenance,
}

impl TrainingPair {
    /// Masked mean brightness of the degraded input; the mask is the
    /// target's coverage plane at 0.5.
    pub fn input_brightness(&self) -> f64 {
        let (w, h) = (self.target_image.width(), self.target_image.height());
        let mut mask = crate::img::PixelMask::new_filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if self.target_image.coverage_at(x, y) >= 0.5 {
                    mask.set(x, y, true);
                }
            }
        }
        self.input_image.masked_mean_luma(&mask)
    }

    pub fn passes_brightness_filter(&self) -> bool {
        self.input_brightness() >= MIN_PAIR_BRIGHTNESS
    }
}

/// Entrywise mean of a non-empty list of coefficient sets.
pub fn mean_sh(targets: &[ShCoeffs]) -> Result<ShCoeffs> {
    if targets.is_empty() {
        return Err(RelitError::InvalidArgument(
            "mean of zero coefficient sets".into(),
        ));
    }
    let mut acc = [[0.0f64; SH_COUNT]; 3];
    for sh in targets {
        for c in 0..3 {
            for k in 0..SH_COUNT {
                acc[c][k] += sh.channels[c][k];
            }
        }
    }
    let n = targets.len() as f64;
    for ch in acc.iter_mut() {
        for v in ch.iter_mut() {
            *v /= n;
        }
    }
    Ok(ShCoeffs::new(acc))
}

/// Extrapolate target lighting away from a sampled ideal point.
///
/// Draw order is fixed (direction, radius, lambda), so a given generator
/// state yields one reproducible triple `(sh_input, lambda_used, ideal)`.
pub fn degrade_sh(
    sh_target: &ShCoeffs,
    mean: &ShCoeffs,
    cfg: &DegradeConfig,
    rng: &mut ChaCha8Rng,
) -> (ShCoeffs, f64, ShCoeffs) {
    // Uniform draw in a 27-dimensional L2 ball: Gaussian direction scaled
    // by radius * u^(1/27).
    let mut dir = [0.0f64; 27];
    let mut norm2 = 0.0;
    for d in dir.iter_mut() {
        *d = StandardNormal.sample(rng);
        norm2 += *d * *d;
    }
    let u: f64 = rng.random();
    let norm = norm2.sqrt();
    let scale = if norm > 1e-12 {
        cfg.ideal_radius * u.powf(1.0 / 27.0) / norm
    } else {
        0.0
    };
    let mean_flat = mean.to_flat();
    let mut ideal_flat = [0.0f64; 27];
    for i in 0..27 {
        ideal_flat[i] = mean_flat[i] + scale * dir[i];
    }
    let ideal = ShCoeffs::from_flat(&ideal_flat);

    let [lo, hi] = cfg.lambda_sh_range;
    let lambda = lo + (hi - lo) * rng.random::<f64>();

    let target_flat = sh_target.to_flat();
    let mut input_flat = [0.0f64; 27];
    for i in 0..27 {
        input_flat[i] = target_flat[i] + lambda * (target_flat[i] - ideal_flat[i]);
    }
    (ShCoeffs::from_flat(&input_flat), lambda, ideal)
}

/// Reshade a target image to the degraded lighting by the per-pixel shading
/// ratio. Pixels without a normal are copied through. The denominator is
/// floored at 1e-3; bitwise-equal coefficient sets short-circuit to an
/// exact copy.
pub fn reshade_image(
    i_t: &RasterImage,
    normals: &NormalMap,
    sh_target: &ShCoeffs,
    sh_input: &ShCoeffs,
) -> Result<RasterImage> {
    if i_t.width() != normals.width() || i_t.height() != normals.height() {
        return Err(RelitError::DimensionMismatch(format!(
            "image {}x{} vs normal map {}x{}",
            i_t.width(),
            i_t.height(),
            normals.width(),
            normals.height()
        )));
    }
    if sh_input.channels == sh_target.channels {
        return Ok(i_t.clone());
    }
    let mut out = i_t.clone();
    for y in 0..i_t.height() {
        for x in 0..i_t.width() {
            let Some(n) = normals.get(x, y) else { continue };
            let lit_in = shade(n, [1.0; 3], sh_input)?;
            let lit_tgt = shade(n, [1.0; 3], sh_target)?;
            let p = i_t.pixel(x, y);
            let mut q = [0.0; 3];
            for c in 0..3 {
                q[c] = p[c] * lit_in[c] / lit_tgt[c].max(1e-3);
            }
            out.set_pixel(x, y, q);
        }
    }
    Ok(out)
}

/// Channel-mean shading per pixel in `[0, 1]`; pixels without geometry get
/// 1 so the degradation leaves them untouched.
pub fn shading_map(normals: &NormalMap, sh: &ShCoeffs) -> Result<ScalarMap> {
    let mut map = ScalarMap::new_filled(normals.width(), normals.height(), 1.0);
    for y in 0..normals.height() {
        for x in 0..normals.width() {
            if let Some(n) = normals.get(x, y) {
                let s = shade(n, [1.0; 3], sh)?;
                map.set(x, y, (s[0] + s[1] + s[2]) / 3.0);
            }
        }
    }
    Ok(map)
}

/// Blur then noise, both scaled by darkness.
///
/// Per output pixel, the blur sigma is `blur_max_sigma * (1 - local mean
/// shading)` (5x5 box average) with a kernel truncated at 3 sigma and
/// renormalized at borders; the noise sigma is `noise_max_sigma *
/// (1 - shading)` applied per channel. Pixels whose sigmas are zero pass
/// through exactly, drawing nothing from the generator.
pub fn apply_darkness_degradation(
    i_s: &RasterImage,
    shading: &ScalarMap,
    cfg: &DegradeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RasterImage> {
    cfg.validate()?;
    let (w, h) = (i_s.width(), i_s.height());
    if shading.width() != w || shading.height() != h {
        return Err(RelitError::DimensionMismatch(format!(
            "image {}x{} vs shading map {}x{}",
            w,
            h,
            shading.width(),
            shading.height()
        )));
    }

    // 5x5 box mean of shading, window clipped at borders.
    let local_mean = |x: usize, y: usize| -> f64 {
        let mut sum = 0.0;
        let mut n = 0.0;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let sx = x as i64 + dx;
                let sy = y as i64 + dy;
                if sx >= 0 && sx < w as i64 && sy >= 0 && sy < h as i64 {
                    sum += shading.get(sx as usize, sy as usize).clamp(0.0, 1.0);
                    n += 1.0;
                }
            }
        }
        sum / n
    };

    let mut blurred = i_s.clone();
    for y in 0..h {
        for x in 0..w {
            let sigma = cfg.blur_max_sigma * (1.0 - local_mean(x, y));
            if sigma <= 0.0 {
                continue;
            }
            let radius = (3.0 * sigma).ceil() as i64;
            let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let sx = x as i64 + dx;
                    let sy = y as i64 + dy;
                    if sx < 0 || sx >= w as i64 || sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let wgt = (-((dx * dx + dy * dy) as f64) * inv_two_sigma2).exp();
                    let p = i_s.pixel(sx as usize, sy as usize);
                    for c in 0..3 {
                        acc[c] += wgt * p[c];
                    }
                    total += wgt;
                }
            }
            blurred.set_pixel(x, y, [acc[0] / total, acc[1] / total, acc[2] / total]);
        }
    }

    let mut out = blurred.clone();
    for y in 0..h {
        for x in 0..w {
            let sigma = cfg.noise_max_sigma * (1.0 - shading.get(x, y).clamp(0.0, 1.0));
            if sigma <= 0.0 {
                continue;
            }
            let p = blurred.pixel(x, y);
            let mut q = [0.0; 3];
            for c in 0..3 {
                let n: f64 = StandardNormal.sample(rng);
                q[c] = p[c] + sigma * n;
            }
            out.set_pixel(x, y, q);
        }
    }
    Ok(out)
}

/// Render a target under `sh_target`, then synthesize its degraded partner.
///
/// The raster setup uses the camera with default sharpness and a black
/// background; geometry normals drive both the reshading and the
/// darkness maps.
pub fn build_pair(
    model: &MorphableModel,
    coeffs: &FaceCoefficients,
    camera: &Camera,
    sh_target: &ShCoeffs,
    mean: &ShCoeffs,
    cfg: &DegradeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    cfg.validate()?;
    let mesh = model.evaluate(coeffs)?;
    let raster_cfg = RasterConfig::new(camera.clone());
    let geom = render_geometry(&mesh, &raster_cfg)?;
    let target = render(&mesh, sh_target, &raster_cfg)?.image;

    let (sh_input, lambda_used, ideal_point) = degrade_sh(sh_target, mean, cfg, rng);
    let reshaded = reshade_image(&target, &geom.normals, sh_target, &sh_input)?;
    let shading = shading_map(&geom.normals, &sh_input)?;
    let input = apply_darkness_degradation(&reshaded, &shading, cfg, rng)?;

    Ok(TrainingPair {
        input_image: input,
        target_image: target,
        sh_input,
        sh_target: sh_target.clone(),
        provenance: PairProvenance {
            schema_version: 1,
            config: cfg.clone(),
            lambda_used,
            ideal_point,
        },
    })
}
