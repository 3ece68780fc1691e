//! Image quality metrics over unit-range images: PSNR with an infinite
//! sentinel for identical inputs, and single-scale SSIM with the canonical
//! 11x11 Gaussian window. Both treat pixel values as already normalized
//! to [0, 1] (MAX = 1); 8-bit sources must be divided by 255 on load,
//! which the PNG reader in this crate does.

use serde::{Deserialize, Serialize};

use crate::error::{RelitError, Result};
use crate::img::{PixelMask, RasterImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(RelitError::DimensionMismatch(format!(
            "image {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
fn mse(a: &RasterImage, b: &RasterImage) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.pixels().len() as f64
}

/// `10 * log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_dims(a, b)?;
    let e = mse(a, b);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / e).log10())
}

/// PSNR restricted to masked pixels (face-crop evaluation). The mask must
/// select at least one pixel.
pub fn psnr_masked(a: &RasterImage, b: &RasterImage, mask: &PixelMask) -> Result<f64> {
    check_dims(a, b)?;
    if mask.count() == 0 {
        return Err(RelitError::InvalidArgument("empty metric mask".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !mask.get(x, y) {
                continue;
            }
            let pa = a.pixel(x, y);
            let pb = b.pixel(x, y);
            for c in 0..3 {
                let d = pa[c] - pb[c];
                acc += d * d;
            }
            n += 3;
        }
    }
    let e = acc / n as f64;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / e).log10())
}

/// Normalized 11x11 Gaussian window, sigma 1.5.
fn ssim_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Mean local SSIM over all fully interior windows, averaged across the
/// three channels. Requires both dims to be at least the window size.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(RelitError::InvalidArgument(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = ssim_window();
    let c1 = (SSIM_K1) * (SSIM_K1);
    let c2 = (SSIM_K2) * (SSIM_K2);

    let mut channel_means = [0.0f64; 3];
    for (c, mean_slot) in channel_means.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut e_aa = 0.0;
                let mut e_bb = 0.0;
                let mut e_ab = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let g = win[i * SSIM_WINDOW + j];
                        let va = a.pixel(x0 + j, y0 + i)[c];
                        let vb = b.pixel(x0 + j, y0 + i)[c];
                        mu_a += g * va;
                        mu_b += g * vb;
                        e_aa += g * (va * va);
                        e_bb += g * (vb * vb);
                        // parenthesized so swapping a and b is bit-exact
                        e_ab += g * (va * vb);
                    }
                }
                let var_a = e_aa - mu_a * mu_a;
                let var_b = e_bb - mu_b * mu_b;
                let cov = e_ab - mu_a * mu_b;
                let num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                acc += num / den;
                count += 1;
            }
        }
        *mean_slot = acc / count as f64;
    }
    Ok((channel_means[0] + channel_means[1] + channel_means[2]) / 3.0)
}

/// Serialize PSNR so the infinite sentinel survives JSON (which has no
/// literal for infinity): finite values as numbers, `+inf` as the string
/// `"inf"`.
mod psnr_db_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct PsnrVisitor;

    impl Visitor<'_> for PsnrVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v {
                "inf" | "+inf" => Ok(f64::INFINITY),
                other => Err(de::Error::custom(format!("unexpected PSNR string {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(PsnrVisitor)
    }
}

/// Metrics for one evaluated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePairMetrics {
    pub name: String,
    #[serde(with = "psnr_db_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Aggregate metrics plus the per-image breakdown. Aggregates are
/// arithmetic means of the per-image values, so one identical pair makes
/// the aggregate PSNR infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(with = "psnr_db_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<ImagePairMetrics>,
}

fn default_schema_version() -> u32 {
    1
}

/// Evaluate PSNR and SSIM over named pairs of (degraded, reference).
pub fn metric_report(pairs: &[(&str, &RasterImage, &RasterImage)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(RelitError::InvalidArgument(
            "metric report over zero pairs".into(),
        ));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (name, a, b) in pairs {
        let p = psnr(a, b)?;
        let s = ssim(a, b)?;
        psnr_sum += p;
        ssim_sum += s;
        per_image.push(ImagePairMetrics {
            name: name.to_string(),
            psnr_db: p,
            ssim: s,
        });
    }
    Ok(MetricReport {
        schema_version: 1,
        psnr_db: psnr_sum / pairs.len() as f64,
        ssim: ssim_sum / pairs.len() as f64,
        per_image,
    })
}
