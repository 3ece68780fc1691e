//! End-to-end hot paths: rendering, gradient rendering, lighting
//! estimation, a fit step, and the image metrics.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use relit_bench::{bench_image, bench_mesh, bench_raster, bench_sh};
use relit_core::correction::{fit_lighting, CorrectionConfig};
use relit_core::metrics::{psnr, ssim};
use relit_core::raster::{render, render_geometry, render_with_gradients};
use relit_core::sh::estimate_sh;

fn renderer(c: &mut Criterion) {
    let mesh = bench_mesh(12);
    let sh = bench_sh(0.6);
    let mut group = c.benchmark_group("render");
    for size in [64usize, 128] {
        let cfg = bench_raster(size);
        group.bench_function(format!("forward_{size}"), |b| {
            b.iter(|| render(black_box(&mesh), black_box(&sh), &cfg).unwrap())
        });
        group.bench_function(format!("with_gradients_{size}"), |b| {
            b.iter(|| render_with_gradients(black_box(&mesh), black_box(&sh), &cfg).unwrap())
        });
    }
    group.finish();
}

fn estimation(c: &mut Criterion) {
    let mesh = bench_mesh(12);
    let sh = bench_sh(0.6);
    let cfg = bench_raster(128);
    let image = render(&mesh, &sh, &cfg).unwrap().image;
    let geom = render_geometry(&mesh, &cfg).unwrap();
    let mask = geom.coverage_mask(0.5);
    c.bench_function("estimate_sh_128", |b| {
        b.iter(|| {
            estimate_sh(
                black_box(&image),
                &geom.normals,
                &mask,
                Some(&geom.albedo),
            )
            .unwrap()
        })
    });
}

fn fitting(c: &mut Criterion) {
    let mesh = bench_mesh(10);
    let cfg_raster = bench_raster(64);
    let i_s = render(&mesh, &bench_sh(0.55), &cfg_raster).unwrap().image;
    let i_t = render(&mesh, &bench_sh(0.75), &cfg_raster).unwrap().image;
    // fixed small step count so the benchmark measures per-step cost
    let cfg = CorrectionConfig {
        steps: 10,
        ..CorrectionConfig::default()
    };
    c.bench_function("fit_lighting_10_steps_64", |b| {
        b.iter_batched(
            || (i_s.clone(), i_t.clone()),
            |(s, t)| fit_lighting(&mesh, &cfg_raster, &s, Some(&t), &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let a = bench_image(128, 128, 1);
    let b_img = bench_image(128, 128, 2);
    c.bench_function("psnr_128", |b| {
        b.iter(|| psnr(black_box(&a), black_box(&b_img)).unwrap())
    });
    c.bench_function("ssim_128", |b| {
        b.iter(|| ssim(black_box(&a), black_box(&b_img)).unwrap())
    });
}

criterion_group!(benches, renderer, estimation, fitting, metrics);
criterion_main!(benches);
