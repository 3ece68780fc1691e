//! Deterministic generator for the committed end-to-end fixture: one
//! synthetic face rendered under poor lighting (input) and under good
//! lighting (target), plus the model and coefficient files the pipeline
//! subcommand needs. Usage:
//!
//!     cargo run -p relit-cli --example make_fixture [out_dir]
//!
//! The default output directory is `fixtures/pipeline`.

use std::path::PathBuf;

use relit_core::morphable::{make_synthetic_model, FaceCoefficients};
use relit_core::raster::{render, Camera, RasterConfig};
use relit_core::sh::ShCoeffs;

const SIZE: usize = 48;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures/pipeline"));
    std::fs::create_dir_all(&dir).expect("create fixture dir");

    let model = make_synthetic_model(12, 40);
    let mut coeffs = FaceCoefficients::zeros(4, 3, 3);
    coeffs.alpha[0] = 0.04;
    coeffs.alpha[2] = -0.03;
    coeffs.beta[1] = 0.02;
    coeffs.zeta[0] = 0.05;
    let mesh = model.evaluate(&coeffs).expect("evaluate fixture face");

    let mut sh_target = ShCoeffs::ambient(0.72);
    for c in 0..3 {
        sh_target.channels[c][1] = 0.07;
        sh_target.channels[c][2] = 0.18;
        sh_target.channels[c][3] = 0.10 - 0.02 * c as f64;
        sh_target.channels[c][6] = 0.03;
    }
    // dim and lit from the opposite side, the degradation the fit undoes
    let mut sh_input = ShCoeffs::ambient(0.18);
    for c in 0..3 {
        sh_input.channels[c][1] = -0.04;
        sh_input.channels[c][2] = 0.05;
        sh_input.channels[c][3] = -0.08;
    }

    let cfg = RasterConfig::new(Camera::orthographic(SIZE, SIZE));
    let target = render(&mesh, &sh_target, &cfg).expect("render target").image;
    let input = render(&mesh, &sh_input, &cfg).expect("render input").image;

    model.save_json(&dir.join("model.json")).unwrap();
    coeffs.save_json(&dir.join("coeffs.json")).unwrap();
    sh_target.save_json(&dir.join("target_sh.json")).unwrap();
    sh_input.save_json(&dir.join("input_sh.json")).unwrap();
    target.save_png(&dir.join("target.png")).unwrap();
    input.save_png(&dir.join("input.png")).unwrap();
    println!("wrote fixture to {}", dir.display());
}
