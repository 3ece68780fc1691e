//! Soft triangle rasterizer with probabilistic pixel aggregation.
//!
//! Every triangle contributes to every nearby pixel through a weight that
//! falls off with squared screen-space distance (sigmoid, sharpness
//! `sigma`) and rises with proximity to the camera (softmax over
//! normalized depth, temperature `gamma_depth`). A fixed background logit
//! competes in the same softmax, so weights plus the background weight sum
//! to exactly 1 per pixel. Colors come from spherical-harmonic shading of
//! interpolated vertex normals and albedo.
//!
//! Aggregated colors are clamped to `[0, 1]` once, after the weighted sum;
//! the pre-clamp values are kept so optimizers can gate gradients at the
//! clamp. Pixel weights do not depend on lighting or albedo, which makes
//! the lighting gradient a plain weighted sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RelitError, Result};
use crate::img::{PixelMask, RasterImage, ScalarMap};
use crate::morphable::Mesh;
use crate::sh::{sh_basis_unchecked, ShCoeffs, SH_COUNT};

/// Geometric logits below `-LOGIT_CUTOFF` relative to the sigmoid peak are
/// dropped; their weights would be below ~1e-13.
const LOGIT_CUTOFF: f64 = 30.0;

/// Projection model. The camera sits on the +z axis looking toward -z,
/// so larger view-space z means nearer to the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CameraKind {
    /// `u = cx + scale * x`, `v = cy - scale * y`; depth ignored by projection.
    Orthographic { scale: f64 },
    /// `u = cx + focal * x / -z`; points at or behind the camera plane are culled.
    Perspective { focal: f64 },
}

/// Camera intrinsics plus target raster size. `v` grows downward, and pixel
/// `(x, y)` is sampled at screen point `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub kind: CameraKind,
    pub width: usize,
    pub height: usize,
    /// Principal point in pixels, usually the image center.
    pub principal: (f64, f64),
}

impl Camera {
    /// Orthographic camera whose scale fits a ~[-0.8, 0.8] object with margin.
    pub fn orthographic(width: usize, height: usize) -> Self {
        let scale = 0.6 * width.min(height) as f64;
        Self::orthographic_with_scale(width, height, scale)
    }

    pub fn orthographic_with_scale(width: usize, height: usize, scale: f64) -> Self {
        Self {
            kind: CameraKind::Orthographic { scale },
            width,
            height,
            principal: (width as f64 / 2.0, height as f64 / 2.0),
        }
    }

    pub fn perspective(width: usize, height: usize, focal: f64) -> Self {
        Self {
            kind: CameraKind::Perspective { focal },
            width,
            height,
            principal: (width as f64 / 2.0, height as f64 / 2.0),
        }
    }

    /// Project a view-space point to (screen uv, view z).
    /// Returns `None` for perspective points at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<([f64; 2], f64)> {
        let (cx, cy) = self.principal;
        match self.kind {
            CameraKind::Orthographic { scale } => {
                Some(([cx + scale * p[0], cy - scale * p[1]], p[2]))
            }
            CameraKind::Perspective { focal } => {
                if p[2] >= -1e-6 {
                    return None;
                }
                let inv = 1.0 / -p[2];
                Some(([cx + focal * p[0] * inv, cy - focal * p[1] * inv], p[2]))
            }
        }
    }
}

/// Renderer parameters shared by color and geometry passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub camera: Camera,
    /// Sharpness of the distance sigmoid, in squared pixels.
    pub sigma: f64,
    /// Softmax temperature over normalized depth.
    pub gamma_depth: f64,
    /// Color where no triangle wins.
    pub background: [f64; 3],
}

impl RasterConfig {
    pub fn new(camera: Camera) -> Self {
        let sigma = Self::default_sigma(camera.width, camera.height);
        Self {
            camera,
            sigma,
            gamma_depth: 1e-2,
            background: [0.0; 3],
        }
    }

    /// `1e-4 * min(height, width)^2`, so blur width scales with resolution.
    pub fn default_sigma(width: usize, height: usize) -> f64 {
        let m = width.min(height) as f64;
        1e-4 * m * m
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera.width == 0 || self.camera.height == 0 {
            return Err(RelitError::InvalidArgument(
                "raster size must be at least 1x1".into(),
            ));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(RelitError::InvalidArgument(format!(
                "sigma must be finite and positive, got {}",
                self.sigma
            )));
        }
        if !self.gamma_depth.is_finite() || self.gamma_depth <= 0.0 {
            return Err(RelitError::InvalidArgument(format!(
                "gamma_depth must be finite and positive, got {}",
                self.gamma_depth
            )));
        }
        Ok(())
    }
}

/// Per-pixel unit normals; the zero vector marks pixels with no geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// The normal at a pixel, or `None` where no geometry was rasterized.
    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 3]> {
        let n = self.data[y * self.width + x];
        let len2 = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
        if len2 < 0.25 {
            None
        } else {
            Some(n)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, n: [f64; 3]) {
        self.data[y * self.width + x] = n;
    }
}

/// Front-surface attribute buffers from a geometry-only pass.
#[derive(Debug, Clone)]
pub struct GeometryBuffers {
    /// Soft coverage, `1 - background weight`.
    pub coverage: ScalarMap,
    /// Unit normal of the dominant triangle per covered pixel.
    pub normals: NormalMap,
    /// Interpolated albedo of the dominant triangle; background pixels are black.
    pub albedo: RasterImage,
}

impl GeometryBuffers {
    /// Pixels whose coverage meets `threshold`.
    pub fn coverage_mask(&self, threshold: f64) -> PixelMask {
        let (w, h) = (self.coverage.width(), self.coverage.height());
        let mut mask = PixelMask::new_filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if self.coverage.get(x, y) >= threshold {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }
}

/// One pixel's sparse albedo derivative:
/// `(vertex, d pixel[c] / d albedo[vertex][c])` for the pre-clamp color,
/// vertices with zero influence omitted.
pub type AlbedoGradEntries = Vec<(usize, [f64; 3])>;

/// Rendered image plus optional analytic derivatives.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// Aggregated color clamped to `[0, 1]`, coverage plane filled in.
    pub image: RasterImage,
    /// Aggregated color before the final clamp, `H*W*3`.
    pub unclamped: Vec<f64>,
    /// `d pixel[c] / d sh[c][k]` for the pre-clamp color, laid out
    /// `((y*W + x) * 3 + c) * 9 + k`. Cross-channel terms are zero.
    pub d_sh: Option<Vec<f64>>,
    /// Per-pixel albedo derivatives, row-major.
    pub d_albedo: Option<Vec<AlbedoGradEntries>>,
}

impl RenderOutput {
    pub fn unclamped_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.image.width() + x) * 3;
        [
            self.unclamped[i],
            self.unclamped[i + 1],
            self.unclamped[i + 2],
        ]
    }

    /// The 9 lighting derivatives for one pixel and channel.
    pub fn d_sh_at(&self, x: usize, y: usize, c: usize) -> Option<&[f64]> {
        let d = self.d_sh.as_ref()?;
        let i = ((y * self.image.width() + x) * 3 + c) * SH_COUNT;
        Some(&d[i..i + SH_COUNT])
    }
}

struct ProjTri {
    uv: [[f64; 2]; 3],
    z: [f64; 3],
    normals: [[f64; 3]; 3],
    albedo: [[f64; 3]; 3],
    verts: [usize; 3],
    bbox: [f64; 4],
    fallback_normal: [f64; 3],
}

struct Prepared {
    tris: Vec<ProjTri>,
    z_min: f64,
    z_span: f64,
}

fn prepare(mesh: &Mesh, camera: &Camera) -> Result<Prepared> {
    if mesh.positions.len() != mesh.normals.len() || mesh.positions.len() != mesh.albedo.len() {
        return Err(RelitError::DimensionMismatch(format!(
            "mesh has {} positions, {} normals, {} albedo entries",
            mesh.positions.len(),
            mesh.normals.len(),
            mesh.albedo.len()
        )));
    }
    let projected: Vec<Option<([f64; 2], f64)>> = mesh
        .positions
        .iter()
        .map(|&p| camera.project(p))
        .collect();

    let mut tris = Vec::with_capacity(mesh.faces.len());
    let mut z_min = f64::INFINITY;
    let mut z_max = f64::NEG_INFINITY;
    for (fi, f) in mesh.faces.iter().enumerate() {
        for &v in f {
            if v >= mesh.positions.len() {
                return Err(RelitError::InvalidArgument(format!(
                    "face {fi} references vertex {v}, mesh has {}",
                    mesh.positions.len()
                )));
            }
        }
        let (Some(p0), Some(p1), Some(p2)) = (projected[f[0]], projected[f[1]], projected[f[2]])
        else {
            continue; // behind the camera plane
        };
        let uv = [p0.0, p1.0, p2.0];
        let z = [p0.1, p1.1, p2.1];
        for &zv in &z {
            z_min = z_min.min(zv);
            z_max = z_max.max(zv);
        }
        let bbox = [
            uv[0][0].min(uv[1][0]).min(uv[2][0]),
            uv[0][0].max(uv[1][0]).max(uv[2][0]),
            uv[0][1].min(uv[1][1]).min(uv[2][1]),
            uv[0][1].max(uv[1][1]).max(uv[2][1]),
        ];
        let normals = [mesh.normals[f[0]], mesh.normals[f[1]], mesh.normals[f[2]]];
        let mut avg = [0.0f64; 3];
        for n in &normals {
            for k in 0..3 {
                avg[k] += n[k];
            }
        }
        let fallback_normal = normalize_or(avg, [0.0, 0.0, 1.0]);
        tris.push(ProjTri {
            uv,
            z,
            normals,
            albedo: [mesh.albedo[f[0]], mesh.albedo[f[1]], mesh.albedo[f[2]]],
            verts: *f,
            bbox,
            fallback_normal,
        });
    }
    let z_span = if tris.is_empty() { 0.0 } else { z_max - z_min };
    Ok(Prepared { tris, z_min, z_span })
}

fn normalize_or(v: [f64; 3], fallback: [f64; 3]) -> [f64; 3] {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len > 1e-9 {
        [v[0] / len, v[1] / len, v[2] / len]
    } else {
        fallback
    }
}

/// `ln(sigmoid(x))`, stable for large |x|.
fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Squared distance from `p` to segment `ab`, plus the parameter of the
/// closest point (`0` at `a`, `1` at `b`).
fn point_segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    (dx * dx + dy * dy, t)
}

struct Candidate {
    tri: usize,
    logit: f64,
    bary: [f64; 3],
}

/// Collect contributions at screen point `(px, py)`, ordered by triangle index.
fn collect_candidates(
    prep: &Prepared,
    sigma: f64,
    gamma: f64,
    px: f64,
    py: f64,
    out: &mut Vec<Candidate>,
) {
    out.clear();
    let reach = (LOGIT_CUTOFF * sigma).sqrt();
    let reach2 = LOGIT_CUTOFF * sigma;
    for (ti, tri) in prep.tris.iter().enumerate() {
        if px < tri.bbox[0] - reach
            || px > tri.bbox[1] + reach
            || py < tri.bbox[2] - reach
            || py > tri.bbox[3] + reach
        {
            continue;
        }
        let p = [px, py];
        let [a, b, c] = tri.uv;
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);

        let mut inside = false;
        let mut bary = [0.0f64; 3];
        if area2.abs() > 1e-12 {
            let w0 = ((b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0])) / area2;
            let w1 = ((c[0] - p[0]) * (a[1] - p[1]) - (c[1] - p[1]) * (a[0] - p[0])) / area2;
            let w2 = 1.0 - w0 - w1;
            if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                inside = true;
                bary = [w0, w1, w2];
            }
        }

        // Distance to the boundary: nearest of the three edges. For outside
        // pixels the winning edge also supplies interpolation coordinates.
        let edges = [(0usize, 1usize), (1, 2), (2, 0)];
        let mut d2 = f64::INFINITY;
        let mut edge_bary = [0.0f64; 3];
        for &(i, j) in &edges {
            let (d, t) = point_segment_dist2(p, tri.uv[i], tri.uv[j]);
            if d < d2 {
                d2 = d;
                edge_bary = [0.0; 3];
                edge_bary[i] = 1.0 - t;
                edge_bary[j] = t;
            }
        }
        if !inside {
            if d2 > reach2 {
                continue;
            }
            bary = edge_bary;
        }

        let z = bary[0] * tri.z[0] + bary[1] * tri.z[1] + bary[2] * tri.z[2];
        let znorm = if prep.z_span < 1e-12 {
            1.0
        } else {
            0.2 + 0.8 * (z - prep.z_min) / prep.z_span
        };
        let delta = if inside { 1.0 } else { -1.0 };
        let logit = znorm / gamma + ln_sigmoid(delta * d2 / sigma);
        out.push(Candidate { tri: ti, logit, bary });
    }
}

/// Softmax weights over candidates plus the fixed-zero background logit.
/// Returns the background weight; per-candidate weights land in `weights`.
fn softmax_with_background(cands: &[Candidate], weights: &mut Vec<f64>) -> f64 {
    weights.clear();
    let mut m = 0.0f64; // background logit
    for c in cands {
        m = m.max(c.logit);
    }
    let mut sum = (-m).exp();
    for c in cands {
        let e = (c.logit - m).exp();
        weights.push(e);
        sum += e;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    let w_b = (-m).exp() / sum;
    debug_assert!({
        let total: f64 = weights.iter().sum::<f64>() + w_b;
        (total - 1.0).abs() < 1e-9
    });
    w_b
}

fn interp_normal(tri: &ProjTri, bary: [f64; 3]) -> [f64; 3] {
    let mut n = [0.0f64; 3];
    for v in 0..3 {
        for k in 0..3 {
            n[k] += bary[v] * tri.normals[v][k];
        }
    }
    normalize_or(n, tri.fallback_normal)
}

fn interp_albedo(tri: &ProjTri, bary: [f64; 3]) -> [f64; 3] {
    let mut a = [0.0f64; 3];
    for v in 0..3 {
        for k in 0..3 {
            a[k] += bary[v] * tri.albedo[v][k];
        }
    }
    a
}

/// Render the mesh under the given lighting.
pub fn render(mesh: &Mesh, sh: &ShCoeffs, config: &RasterConfig) -> Result<RenderOutput> {
    render_impl(mesh, sh, config, false)
}

/// Render and also compute analytic derivatives of the pre-clamp color with
/// respect to lighting coefficients and vertex albedo.
pub fn render_with_gradients(
    mesh: &Mesh,
    sh: &ShCoeffs,
    config: &RasterConfig,
) -> Result<RenderOutput> {
    render_impl(mesh, sh, config, true)
}

fn render_impl(
    mesh: &Mesh,
    sh: &ShCoeffs,
    config: &RasterConfig,
    with_gradients: bool,
) -> Result<RenderOutput> {
    config.validate()?;
    if !sh.is_finite() {
        return Err(RelitError::InvalidArgument(
            "lighting coefficients must be finite".into(),
        ));
    }
    let prep = prepare(mesh, &config.camera)?;
    let (w, h) = (config.camera.width, config.camera.height);

    struct Row {
        unclamped: Vec<f64>,
        coverage: Vec<f64>,
        d_sh: Option<Vec<f64>>,
        d_albedo: Option<Vec<AlbedoGradEntries>>,
    }

    let rows: Vec<Row> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut unclamped = vec![0.0f64; w * 3];
            let mut coverage = vec![0.0f64; w];
            let mut d_sh = with_gradients.then(|| vec![0.0f64; w * 3 * SH_COUNT]);
            let mut d_albedo =
                with_gradients.then(|| vec![Vec::<(usize, [f64; 3])>::new(); w]);
            let mut cands = Vec::new();
            let mut weights = Vec::new();
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                collect_candidates(&prep, config.sigma, config.gamma_depth, px, py, &mut cands);
                let w_b = softmax_with_background(&cands, &mut weights);
                coverage[x] = 1.0 - w_b;

                let mut color = [
                    w_b * config.background[0],
                    w_b * config.background[1],
                    w_b * config.background[2],
                ];
                for (cand, &wj) in cands.iter().zip(weights.iter()) {
                    let tri = &prep.tris[cand.tri];
                    let normal = interp_normal(tri, cand.bary);
                    let alb = interp_albedo(tri, cand.bary);
                    let basis = sh_basis_unchecked(normal);
                    for c in 0..3 {
                        let dot: f64 = sh.channels[c]
                            .iter()
                            .zip(basis.iter())
                            .map(|(s, b)| s * b)
                            .sum();
                        let lit = dot.max(0.0);
                        color[c] += wj * alb[c] * lit;
                        if let Some(ds) = d_sh.as_mut() {
                            if dot > 0.0 {
                                let base = (x * 3 + c) * SH_COUNT;
                                for k in 0..SH_COUNT {
                                    ds[base + k] += wj * alb[c] * basis[k];
                                }
                            }
                        }
                        if let Some(da) = d_albedo.as_mut() {
                            if lit > 0.0 {
                                for v in 0..3 {
                                    let g = wj * cand.bary[v] * lit;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let list = &mut da[x];
                                    let vid = tri.verts[v];
                                    match list.iter_mut().find(|(id, _)| *id == vid) {
                                        Some((_, acc)) => acc[c] += g,
                                        None => {
                                            let mut acc = [0.0; 3];
                                            acc[c] = g;
                                            list.push((vid, acc));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                unclamped[x * 3..x * 3 + 3].copy_from_slice(&color);
            }
            Row {
                unclamped,
                coverage,
                d_sh,
                d_albedo,
            }
        })
        .collect();

    let mut unclamped = Vec::with_capacity(w * h * 3);
    let mut coverage = Vec::with_capacity(w * h);
    let mut d_sh = with_gradients.then(|| Vec::with_capacity(w * h * 3 * SH_COUNT));
    let mut d_albedo = with_gradients.then(|| Vec::with_capacity(w * h));
    for row in rows {
        unclamped.extend_from_slice(&row.unclamped);
        coverage.extend_from_slice(&row.coverage);
        if let (Some(acc), Some(rd)) = (d_sh.as_mut(), row.d_sh) {
            acc.extend_from_slice(&rd);
        }
        if let (Some(acc), Some(rd)) = (d_albedo.as_mut(), row.d_albedo) {
            acc.extend(rd);
        }
    }

    for v in &unclamped {
        if !v.is_finite() {
            return Err(RelitError::NonFinite {
                step: 0,
                detail: "rendered color".into(),
            });
        }
    }

    let image = RasterImage::from_planes(w, h, unclamped.clone(), coverage)?;
    Ok(RenderOutput {
        image,
        unclamped,
        d_sh,
        d_albedo,
    })
}

/// Geometry-only pass: coverage plus front-surface normals and albedo.
///
/// The dominant (highest-weight) triangle supplies each covered pixel's
/// attributes; pixels where nothing reaches keep a zero normal.
pub fn render_geometry(mesh: &Mesh, config: &RasterConfig) -> Result<GeometryBuffers> {
    config.validate()?;
    let prep = prepare(mesh, &config.camera)?;
    let (w, h) = (config.camera.width, config.camera.height);

    struct Row {
        coverage: Vec<f64>,
        normals: Vec<[f64; 3]>,
        albedo: Vec<f64>,
    }

    let rows: Vec<Row> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut coverage = vec![0.0f64; w];
            let mut normals = vec![[0.0f64; 3]; w];
            let mut albedo = vec![0.0f64; w * 3];
            let mut cands = Vec::new();
            let mut weights = Vec::new();
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                collect_candidates(&prep, config.sigma, config.gamma_depth, px, py, &mut cands);
                let w_b = softmax_with_background(&cands, &mut weights);
                coverage[x] = 1.0 - w_b;
                if let Some(best) = cands
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.logit.total_cmp(&b.logit))
                    .map(|(i, _)| i)
                {
                    let cand = &cands[best];
                    let tri = &prep.tris[cand.tri];
                    normals[x] = interp_normal(tri, cand.bary);
                    let alb = interp_albedo(tri, cand.bary);
                    albedo[x * 3..x * 3 + 3].copy_from_slice(&alb);
                }
            }
            Row {
                coverage,
                normals,
                albedo,
            }
        })
        .collect();

    let mut coverage = ScalarMap::new_filled(w, h, 0.0);
    let mut normals = NormalMap::new(w, h);
    let mut albedo_plane = Vec::with_capacity(w * h * 3);
    let mut coverage_plane = Vec::with_capacity(w * h);
    for (y, row) in rows.iter().enumerate() {
        for x in 0..w {
            coverage.set(x, y, row.coverage[x]);
            normals.set(x, y, row.normals[x]);
        }
        albedo_plane.extend_from_slice(&row.albedo);
        coverage_plane.extend_from_slice(&row.coverage);
    }
    let albedo = RasterImage::from_planes(w, h, albedo_plane, coverage_plane)?;
    Ok(GeometryBuffers {
        coverage,
        normals,
        albedo,
    })
}
