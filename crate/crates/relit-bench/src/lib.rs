//! Shared fixtures for the criterion benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relit_core::morphable::{make_synthetic_model, FaceCoefficients, Mesh};
use relit_core::raster::{Camera, RasterConfig};
use relit_core::sh::ShCoeffs;
use relit_core::RasterImage;

/// Dome mesh with mild seeded coefficients, the shape most paths see.
pub fn bench_mesh(grid: usize) -> Mesh {
    let model = make_synthetic_model(grid, 9);
    let mut coeffs = FaceCoefficients::zeros(4, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for a in coeffs
        .alpha
        .iter_mut()
        .chain(coeffs.beta.iter_mut())
        .chain(coeffs.zeta.iter_mut())
    {
        *a = 0.05 * (rng.random::<f64>() - 0.5);
    }
    model.evaluate(&coeffs).unwrap()
}

pub fn bench_raster(size: usize) -> RasterConfig {
    RasterConfig::new(Camera::orthographic(size, size))
}

/// Directional lighting with energy in every band that the fits exercise.
pub fn bench_sh(scale: f64) -> ShCoeffs {
    ShCoeffs::new([
        [1.6 * scale, 0.10, 0.35, 0.05, 0.0, 0.0, 0.02, 0.0, 0.0],
        [1.5 * scale, 0.00, 0.30, 0.10, 0.0, 0.0, 0.00, 0.0, 0.0],
        [1.4 * scale, 0.05, 0.25, 0.00, 0.0, 0.0, 0.00, 0.0, 0.0],
    ])
}

/// Seeded noise image in [0, 1], for metric benchmarks.
pub fn bench_image(width: usize, height: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RasterImage::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            img.set_pixel(x, y, [rng.random(), rng.random(), rng.random()]);
        }
    }
    img
}
