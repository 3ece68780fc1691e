//! Second-order real spherical harmonics: basis evaluation, shading,
//! and coefficient estimation from an image + normal map.
//!
//! Lighting is 27 numbers total: one 9-vector per color channel, ordered
//! `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]`. Shading takes the
//! raw dot product of coefficients with the basis and floors it at zero;
//! there is no irradiance (cosine-lobe) convolution. An alternate
//! convolved mode would rescale each band before the dot product.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RelitError, Result};
use crate::img::{PixelMask, RasterImage};
use crate::raster::NormalMap;

/// Number of SH basis functions per channel (bands l = 0..2).
pub const SH_COUNT: usize = 9;

// Real SH normalization constants.
const C0: f64 = 0.28209479177387814; // 1 / (2 sqrt(pi))
const C1: f64 = 0.4886025119029199; // sqrt(3 / (4 pi))
const C2_XY: f64 = 1.0925484305920792; // sqrt(15 / (4 pi))
const C2_Z2: f64 = 0.31539156525252005; // sqrt(5 / (16 pi))
const C2_X2Y2: f64 = 0.5462742152960396; // sqrt(15 / (16 pi))

/// Evaluate the 9 real SH basis functions at a unit direction.
///
/// Errors if the direction is not unit length to within 1e-6.
pub fn sh_basis(normal: [f64; 3]) -> Result<[f64; SH_COUNT]> {
    let len2 = normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2];
    if (len2.sqrt() - 1.0).abs() > 1e-6 {
        return Err(RelitError::InvalidArgument(format!(
            "sh_basis needs a unit normal, got length {}",
            len2.sqrt()
        )));
    }
    Ok(sh_basis_unchecked(normal))
}

/// Basis evaluation without the unit-length check; callers must normalize.
pub fn sh_basis_unchecked(n: [f64; 3]) -> [f64; SH_COUNT] {
    let [x, y, z] = n;
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_XY * x * y,
        C2_XY * y * z,
        C2_Z2 * (3.0 * z * z - 1.0),
        C2_XY * x * z,
        C2_X2Y2 * (x * x - y * y),
    ]
}

/// 3x9 SH lighting coefficients, one row of 9 per R, G, B channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoeffs {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Rows are R, G, B; columns follow the crate-wide SH ordering.
    pub channels: [[f64; SH_COUNT]; 3],
}

fn default_schema_version() -> u32 {
    1
}

impl Default for ShCoeffs {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ShCoeffs {
    pub fn zeros() -> Self {
        Self {
            schema_version: 1,
            channels: [[0.0; SH_COUNT]; 3],
        }
    }

    pub fn new(channels: [[f64; SH_COUNT]; 3]) -> Self {
        Self {
            schema_version: 1,
            channels,
        }
    }

    /// Uniform gray lighting whose band-0 term produces `intensity` shading.
    pub fn ambient(intensity: f64) -> Self {
        let c = intensity / C0;
        Self::new([[c, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]; 3])
    }

    pub fn is_finite(&self) -> bool {
        self.channels
            .iter()
            .all(|ch| ch.iter().all(|v| v.is_finite()))
    }

    pub fn add_delta(&self, delta: &ShDelta) -> ShCoeffs {
        let mut out = self.clone();
        for c in 0..3 {
            for k in 0..SH_COUNT {
                out.channels[c][k] += delta.delta[c][k];
            }
        }
        out
    }

    pub fn sub(&self, other: &ShCoeffs) -> ShDelta {
        let mut d = ShDelta::zeros();
        for c in 0..3 {
            for k in 0..SH_COUNT {
                d.delta[c][k] = self.channels[c][k] - other.channels[c][k];
            }
        }
        d
    }

    /// Largest absolute entry difference against another coefficient set.
    pub fn linf_distance(&self, other: &ShCoeffs) -> f64 {
        let mut m: f64 = 0.0;
        for c in 0..3 {
            for k in 0..SH_COUNT {
                m = m.max((self.channels[c][k] - other.channels[c][k]).abs());
            }
        }
        m
    }

    /// Euclidean norm over all 27 entries.
    pub fn l2_norm(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|ch| ch.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flatten to a 27-vector (channel-major).
    pub fn to_flat(&self) -> [f64; 27] {
        let mut out = [0.0; 27];
        for c in 0..3 {
            out[c * SH_COUNT..(c + 1) * SH_COUNT].copy_from_slice(&self.channels[c]);
        }
        out
    }

    pub fn from_flat(flat: &[f64; 27]) -> Self {
        let mut channels = [[0.0; SH_COUNT]; 3];
        for c in 0..3 {
            channels[c].copy_from_slice(&flat[c * SH_COUNT..(c + 1) * SH_COUNT]);
        }
        Self::new(channels)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let coeffs: ShCoeffs = serde_json::from_str(&text)?;
        if !coeffs.is_finite() {
            return Err(RelitError::Parse {
                path: path.display().to_string(),
                detail: "non-finite SH coefficient".into(),
            });
        }
        Ok(coeffs)
    }
}

/// Additive correction to a coefficient set; same 3x9 layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShDelta {
    pub delta: [[f64; SH_COUNT]; 3],
}

impl ShDelta {
    pub fn zeros() -> Self {
        Self {
            delta: [[0.0; SH_COUNT]; 3],
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.delta
            .iter()
            .flat_map(|ch| ch.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Shade one point: `albedo[c] * max(0, sh[c] . basis(normal))`, clamped to `[0, 1]`.
pub fn shade(normal: [f64; 3], albedo: [f64; 3], sh: &ShCoeffs) -> Result<[f64; 3]> {
    let basis = sh_basis(normal)?;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let dot: f64 = sh.channels[c]
            .iter()
            .zip(basis.iter())
            .map(|(a, b)| a * b)
            .sum();
        out[c] = (albedo[c] * dot.max(0.0)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Shading before the final `[0, 1]` clamp (the zero floor still applies).
/// The renderer aggregates these raw values and clamps once per pixel.
pub fn shade_raw(basis: &[f64; SH_COUNT], albedo: [f64; 3], sh: &ShCoeffs) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        let dot: f64 = sh.channels[c]
            .iter()
            .zip(basis.iter())
            .map(|(a, b)| a * b)
            .sum();
        out[c] = albedo[c] * dot.max(0.0);
    }
    out
}

/// Estimate SH coefficients from an image and per-pixel normals by linear
/// least squares (thin QR per channel).
///
/// Each masked pixel contributes one equation per channel:
/// `basis(n) * albedo[c] . x = intensity[c]`. Albedo defaults to 1 when no
/// map is given. The mask must select at least [`SH_COUNT`] pixels and only
/// pixels whose normals are valid.
pub fn estimate_sh(
    image: &RasterImage,
    normals: &NormalMap,
    mask: &PixelMask,
    albedo: Option<&RasterImage>,
) -> Result<ShCoeffs> {
    if image.width() != normals.width()
        || image.height() != normals.height()
        || image.width() != mask.width()
        || image.height() != mask.height()
    {
        return Err(RelitError::DimensionMismatch(format!(
            "image {}x{}, normals {}x{}, mask {}x{} must agree",
            image.width(),
            image.height(),
            normals.width(),
            normals.height(),
            mask.width(),
            mask.height()
        )));
    }
    if let Some(a) = albedo {
        if !a.same_size(image) {
            return Err(RelitError::DimensionMismatch(
                "albedo map size differs from image".into(),
            ));
        }
    }

    let mut rows: Vec<([f64; SH_COUNT], [f64; 3], [f64; 3])> = Vec::new();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(x, y) {
                continue;
            }
            let n = normals.get(x, y).ok_or_else(|| {
                RelitError::InvalidArgument(format!(
                    "mask selects pixel ({x},{y}) with no valid normal"
                ))
            })?;
            let basis = sh_basis_unchecked(n);
            let alb = albedo.map(|a| a.pixel(x, y)).unwrap_or([1.0; 3]);
            rows.push((basis, alb, image.pixel(x, y)));
        }
    }
    if rows.len() < SH_COUNT {
        return Err(RelitError::InvalidArgument(format!(
            "need at least {SH_COUNT} masked pixels, got {}",
            rows.len()
        )));
    }

    let mut channels = [[0.0; SH_COUNT]; 3];
    for c in 0..3 {
        let mut a = DMatrix::<f64>::zeros(rows.len(), SH_COUNT);
        let mut b = DVector::<f64>::zeros(rows.len());
        for (r, (basis, alb, px)) in rows.iter().enumerate() {
            for k in 0..SH_COUNT {
                a[(r, k)] = basis[k] * alb[c];
            }
            b[r] = px[c];
        }
        let x = solve_least_squares_qr(a, b, c)?;
        for k in 0..SH_COUNT {
            channels[c][k] = x[k];
        }
    }
    Ok(ShCoeffs::new(channels))
}

fn solve_least_squares_qr(a: DMatrix<f64>, b: DVector<f64>, channel: usize) -> Result<DVector<f64>> {
    let qr = a.qr();
    let r = qr.r();
    let max_diag = (0..SH_COUNT).fold(0.0f64, |m, i| m.max(r[(i, i)].abs()));
    let tol = max_diag.max(1e-300) * 1e-10;
    for i in 0..SH_COUNT {
        if r[(i, i)].abs() < tol {
            return Err(RelitError::RankDeficient(format!(
                "SH design matrix for channel {channel} is rank deficient \
                 (|R[{i},{i}]| = {:.3e}); the masked normals do not span 9 dimensions",
                r[(i, i)].abs()
            )));
        }
    }
    let qtb = qr.q().transpose() * b;
    let x = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| RelitError::RankDeficient(format!(
            "upper-triangular solve failed for channel {channel}"
        )))?;
    Ok(x)
}

/// Deterministic, nearly-uniform unit directions (Fibonacci spiral).
///
/// Used by estimation tests and integration checks that need
/// well-distributed normals.
pub fn fibonacci_sphere(count: usize) -> Vec<[f64; 3]> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}
