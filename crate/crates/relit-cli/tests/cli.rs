//! End-to-end tests of the `relit` binary: exit codes, files written, and
//! byte-level determinism of every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relit_core::metrics::psnr;
use relit_core::morphable::{make_synthetic_model, FaceCoefficients};
use relit_core::raster::{render, Camera, RasterConfig};
use relit_core::sh::ShCoeffs;
use relit_core::RasterImage;
use serde_json::json;
use tempfile::TempDir;

fn relit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relit"))
        .args(args)
        .output()
        .expect("spawn relit")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exit code")
}

fn arg(p: &Path) -> String {
    p.display().to_string()
}

/// Shared face fixture: a synthetic dome model with zero coefficients.
fn face_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let model = make_synthetic_model(10, 7);
    let model_path = dir.join("model.json");
    model.save_json(&model_path).unwrap();
    let coeffs = FaceCoefficients::zeros(4, 3, 3);
    let coeffs_path = dir.join("coeffs.json");
    coeffs.save_json(&coeffs_path).unwrap();
    (model_path, coeffs_path)
}

/// Gray ambient light plus a mild directional tilt, bright enough to stay
/// clear of the shading clamp on the dome.
fn tilted_sh(ambient: f64) -> ShCoeffs {
    let mut sh = ShCoeffs::ambient(ambient);
    for c in 0..3 {
        sh.channels[c][1] = 0.05 + 0.01 * c as f64;
        sh.channels[c][2] = 0.08;
        sh.channels[c][3] = -0.04;
    }
    sh
}

/// All files under `root` keyed by relative path, skipping manifests
/// (their wall-time field is expected to differ between runs).
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().and_then(|n| n.to_str()) != Some("manifest.json") {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn render_is_deterministic_and_rerunnable() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    let sh_path = tmp.path().join("sh.json");
    tilted_sh(0.75).save_json(&sh_path).unwrap();

    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let run = relit(&[
            "render",
            "--model",
            &arg(&model),
            "--coeffs",
            &arg(&coeffs),
            "--sh",
            &arg(&sh_path),
            "--out-dir",
            &arg(out),
            "--size",
            "48x48",
        ]);
        assert_success(&run);
        assert!(out.join("render.png").is_file());
        assert!(out.join("manifest.json").is_file());
    }
    let bytes_a = fs::read(out_a.join("render.png")).unwrap();
    assert_eq!(bytes_a, fs::read(out_b.join("render.png")).unwrap());

    // replaying the manifest reproduces the render elsewhere
    let out_c = tmp.path().join("c");
    let rerun = relit(&[
        "rerun",
        "--manifest",
        &arg(&out_a.join("manifest.json")),
        "--out-dir",
        &arg(&out_c),
    ]);
    assert_success(&rerun);
    assert_eq!(bytes_a, fs::read(out_c.join("render.png")).unwrap());

    // the rendered size follows --size as HEIGHTxWIDTH
    let img = RasterImage::load_png(&out_a.join("render.png")).unwrap();
    assert_eq!((img.width(), img.height()), (48, 48));
}

#[test]
fn bad_inputs_exit_with_validation_code() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    let sh_path = tmp.path().join("sh.json");
    tilted_sh(0.75).save_json(&sh_path).unwrap();
    let out = tmp.path().join("out");

    let missing = relit(&[
        "render",
        "--model",
        &arg(&tmp.path().join("nope.json")),
        "--coeffs",
        &arg(&coeffs),
        "--sh",
        &arg(&sh_path),
        "--out-dir",
        &arg(&out),
    ]);
    assert_eq!(exit_code(&missing), 2);
    assert!(!missing.stderr.is_empty());

    let bad_size = relit(&[
        "render",
        "--model",
        &arg(&model),
        "--coeffs",
        &arg(&coeffs),
        "--sh",
        &arg(&sh_path),
        "--out-dir",
        &arg(&out),
        "--size",
        "48",
    ]);
    assert_eq!(exit_code(&bad_size), 2);

    // a corrupted image must be rejected, not crash the fit
    let junk = tmp.path().join("junk.png");
    fs::write(&junk, b"this is not a png").unwrap();
    let corrupt = relit(&[
        "pipeline",
        "--model",
        &arg(&model),
        "--coeffs",
        &arg(&coeffs),
        "--input",
        &arg(&junk),
        "--out-dir",
        &arg(&out),
    ]);
    assert_eq!(exit_code(&corrupt), 2);
}

#[test]
fn estimate_reproduces_the_rendered_lighting() {
    let tmp = TempDir::new().unwrap();
    let (model_path, coeffs_path) = face_fixture(tmp.path());
    let truth = tilted_sh(0.7);
    let sh_path = tmp.path().join("sh.json");
    truth.save_json(&sh_path).unwrap();

    let render_dir = tmp.path().join("render");
    assert_success(&relit(&[
        "render",
        "--model",
        &arg(&model_path),
        "--coeffs",
        &arg(&coeffs_path),
        "--sh",
        &arg(&sh_path),
        "--out-dir",
        &arg(&render_dir),
        "--size",
        "48x48",
    ]));

    let est_a = tmp.path().join("est_a");
    let est_b = tmp.path().join("est_b");
    for out in [&est_a, &est_b] {
        assert_success(&relit(&[
            "estimate",
            "--model",
            &arg(&model_path),
            "--coeffs",
            &arg(&coeffs_path),
            "--input",
            &arg(&render_dir.join("render.png")),
            "--out-dir",
            &arg(out),
        ]));
    }
    assert_eq!(
        fs::read(est_a.join("sh_estimate.json")).unwrap(),
        fs::read(est_b.join("sh_estimate.json")).unwrap()
    );

    // the estimate must explain the image: re-rendering under it matches
    // the original render up to 8-bit quantization
    let estimate = ShCoeffs::load_json(&est_a.join("sh_estimate.json")).unwrap();
    let model = make_synthetic_model(10, 7);
    let mesh = model.evaluate(&FaceCoefficients::zeros(4, 3, 3)).unwrap();
    let cfg = RasterConfig::new(Camera::orthographic(48, 48));
    let from_truth = render(&mesh, &truth, &cfg).unwrap().image;
    let from_estimate = render(&mesh, &estimate, &cfg).unwrap().image;
    let db = psnr(&from_truth, &from_estimate).unwrap();
    assert!(db > 40.0, "estimate explains the render at only {db:.2} dB");
}

#[test]
fn pipeline_with_zero_steps_emits_the_initialization_render() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    let sh_path = tmp.path().join("sh_dark.json");
    tilted_sh(0.3).save_json(&sh_path).unwrap();

    let input_dir = tmp.path().join("input");
    assert_success(&relit(&[
        "render",
        "--model",
        &arg(&model),
        "--coeffs",
        &arg(&coeffs),
        "--sh",
        &arg(&sh_path),
        "--out-dir",
        &arg(&input_dir),
        "--size",
        "40x40",
    ]));

    let pipe = tmp.path().join("pipe");
    assert_success(&relit(&[
        "pipeline",
        "--model",
        &arg(&model),
        "--coeffs",
        &arg(&coeffs),
        "--input",
        &arg(&input_dir.join("render.png")),
        "--out-dir",
        &arg(&pipe),
        "--steps",
        "0",
    ]));

    // with no optimization, guidance is exactly the render under the
    // initial lighting estimate
    let check = tmp.path().join("check");
    assert_success(&relit(&[
        "render",
        "--model",
        &arg(&model),
        "--coeffs",
        &arg(&coeffs),
        "--sh",
        &arg(&pipe.join("sh_estimate.json")),
        "--out-dir",
        &arg(&check),
        "--size",
        "40x40",
    ]));
    assert_eq!(
        fs::read(pipe.join("guidance.png")).unwrap(),
        fs::read(check.join("render.png")).unwrap()
    );

    // history records the single pre-update evaluation
    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pipe.join("loss_history.json")).unwrap())
            .unwrap();
    assert_eq!(history["entries"].as_array().unwrap().len(), 1);
}

#[test]
fn correct_writes_the_coefficient_family_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    let dark = tmp.path().join("dark.json");
    tilted_sh(0.3).save_json(&dark).unwrap();
    let bright = tmp.path().join("bright.json");
    tilted_sh(0.75).save_json(&bright).unwrap();

    for (sh, dir) in [(&dark, "in"), (&bright, "tgt")] {
        assert_success(&relit(&[
            "render",
            "--model",
            &arg(&model),
            "--coeffs",
            &arg(&coeffs),
            "--sh",
            &arg(sh),
            "--out-dir",
            &arg(&tmp.path().join(dir)),
            "--size",
            "40x40",
        ]));
    }

    let out_a = tmp.path().join("fit_a");
    let out_b = tmp.path().join("fit_b");
    for out in [&out_a, &out_b] {
        assert_success(&relit(&[
            "correct",
            "--model",
            &arg(&model),
            "--coeffs",
            &arg(&coeffs),
            "--input",
            &arg(&tmp.path().join("in/render.png")),
            "--target",
            &arg(&tmp.path().join("tgt/render.png")),
            "--out-dir",
            &arg(out),
            "--steps",
            "15",
            "--seed",
            "4",
        ]));
    }
    for name in [
        "eps_est.json",
        "delta_sh.json",
        "eps_crt.json",
        "loss_history.json",
        "guidance.png",
    ] {
        assert!(out_a.join(name).is_file(), "{name} missing");
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("loss_history.json")).unwrap())
            .unwrap();
    assert_eq!(history["entries"].as_array().unwrap().len(), 16);
}

/// Write one degrade target: a rendered PNG plus its coefficient sidecar.
fn write_target(
    dir: &Path,
    name: &str,
    model: &Path,
    coeffs: &Path,
    sh: &ShCoeffs,
    tmp: &Path,
) {
    let sh_path = tmp.join(format!("{name}_sh.json"));
    sh.save_json(&sh_path).unwrap();
    let render_dir = tmp.join(format!("{name}_render"));
    assert_success(&relit(&[
        "render",
        "--model",
        &arg(model),
        "--coeffs",
        &arg(coeffs),
        "--sh",
        &arg(&sh_path),
        "--out-dir",
        &arg(&render_dir),
        "--size",
        "32x32",
    ]));
    fs::create_dir_all(dir).unwrap();
    fs::copy(render_dir.join("render.png"), dir.join(format!("{name}.png"))).unwrap();
    let coeffs_value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(coeffs).unwrap()).unwrap();
    let sidecar = json!({ "schema_version": 1, "coeffs": coeffs_value, "sh": sh });
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&sidecar).unwrap(),
    )
    .unwrap();
}

#[test]
fn degrade_identity_config_copies_the_target() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    let targets = tmp.path().join("targets");
    write_target(&targets, "face", &model, &coeffs, &tilted_sh(0.75), tmp.path());

    // zero radius with a single image makes the ideal point equal the
    // target's own lighting, so extrapolation is a no-op
    let cfg_path = tmp.path().join("identity.json");
    fs::write(
        &cfg_path,
        serde_json::to_string(&json!({
            "lambda_sh_range": [1.0, 2.0],
            "ideal_radius": 0.0,
            "blur_max_sigma": 0.0,
            "noise_max_sigma": 0.0,
            "seed": 0
        }))
        .unwrap(),
    )
    .unwrap();

    let out = tmp.path().join("out");
    assert_success(&relit(&[
        "degrade",
        "--model",
        &arg(&model),
        "--input",
        &arg(&targets),
        "--out-dir",
        &arg(&out),
        "--seed",
        "5",
        "--degrade-config",
        &arg(&cfg_path),
    ]));

    let input_png = fs::read(out.join("train/face_input.png")).unwrap();
    let target_png = fs::read(out.join("train/face_target.png")).unwrap();
    assert_eq!(input_png, target_png, "identity config must copy the target");

    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train/face_pair.json")).unwrap())
            .unwrap();
    let lambda = record["provenance"]["lambda_used"].as_f64().unwrap();
    assert!((1.0..=2.0).contains(&lambda));
}

#[test]
fn degrade_splits_pairs_and_reruns_byte_identically() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    let targets = tmp.path().join("targets");
    for (i, ambient) in [0.68, 0.74, 0.8, 0.86].iter().enumerate() {
        let mut sh = tilted_sh(*ambient);
        sh.channels[0][1] += 0.01 * i as f64;
        write_target(&targets, &format!("t{i}"), &model, &coeffs, &sh, tmp.path());
    }
    let before: Vec<String> = fs::read_dir(&targets)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();

    let out = tmp.path().join("out");
    assert_success(&relit(&[
        "degrade",
        "--model",
        &arg(&model),
        "--input",
        &arg(&targets),
        "--out-dir",
        &arg(&out),
        "--seed",
        "3",
        "--split",
        "0.5",
    ]));

    // the input directory is read-only for the subcommand
    let after: Vec<String> = fs::read_dir(&targets)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(before.len(), after.len());

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    let pairs = summary["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 4);
    let train = pairs.iter().filter(|p| p["split"] == "train").count();
    let val = pairs.iter().filter(|p| p["split"] == "val").count();
    assert_eq!((train, val), (2, 2));
    for p in pairs {
        let lambda = p["lambda_used"].as_f64().unwrap();
        assert!((1.0..=2.0).contains(&lambda), "lambda {lambda} out of range");
    }

    // replay from the manifest into a fresh directory
    let out2 = tmp.path().join("out2");
    assert_success(&relit(&[
        "rerun",
        "--manifest",
        &arg(&out.join("manifest.json")),
        "--out-dir",
        &arg(&out2),
    ]));
    assert_eq!(tree_bytes(&out), tree_bytes(&out2));
}

#[test]
fn metrics_scores_files_and_directories() {
    let tmp = TempDir::new().unwrap();
    let (model, coeffs) = face_fixture(tmp.path());
    for (name, ambient) in [("a", 0.7), ("b", 0.45)] {
        let sh_path = tmp.path().join(format!("{name}.json"));
        tilted_sh(ambient).save_json(&sh_path).unwrap();
        assert_success(&relit(&[
            "render",
            "--model",
            &arg(&model),
            "--coeffs",
            &arg(&coeffs),
            "--sh",
            &arg(&sh_path),
            "--out-dir",
            &arg(&tmp.path().join(name)),
            "--size",
            "32x32",
        ]));
    }
    let img_a = tmp.path().join("a/render.png");
    let img_b = tmp.path().join("b/render.png");

    // identical files: the PSNR sentinel must survive JSON and CSV
    let same = tmp.path().join("same");
    assert_success(&relit(&[
        "metrics",
        "--input",
        &arg(&img_a),
        "--target",
        &arg(&img_a),
        "--out-dir",
        &arg(&same),
    ]));
    let csv = fs::read_to_string(same.join("metrics.csv")).unwrap();
    assert!(csv.contains("inf"), "csv: {csv}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(same.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"][0]["psnr_db"], "inf");
    assert_eq!(report["per_image"][0]["ssim"], 1.0);

    // directory mode pairs by file name
    let dir_in = tmp.path().join("dir_in");
    let dir_tg = tmp.path().join("dir_tg");
    fs::create_dir_all(&dir_in).unwrap();
    fs::create_dir_all(&dir_tg).unwrap();
    for name in ["x.png", "y.png"] {
        fs::copy(&img_a, dir_in.join(name)).unwrap();
        fs::copy(&img_b, dir_tg.join(name)).unwrap();
    }
    let out_a = tmp.path().join("m1");
    let out_b = tmp.path().join("m2");
    for out in [&out_a, &out_b] {
        assert_success(&relit(&[
            "metrics",
            "--input",
            &arg(&dir_in),
            "--target",
            &arg(&dir_tg),
            "--out-dir",
            &arg(out),
        ]));
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);
    assert_eq!(
        fs::read(out_a.join("metrics.json")).unwrap(),
        fs::read(out_b.join("metrics.json")).unwrap()
    );

    // mixing a file with a directory is a usage error
    let mixed = relit(&[
        "metrics",
        "--input",
        &arg(&img_a),
        "--target",
        &arg(&dir_tg),
        "--out-dir",
        &arg(&tmp.path().join("mixed")),
    ]);
    assert_eq!(exit_code(&mixed), 2);
}

#[test]
fn gradcheck_and_demo_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let g1 = tmp.path().join("g1");
    let g2 = tmp.path().join("g2");
    for out in [&g1, &g2] {
        let run = relit(&["gradcheck", "--seed", "9", "--out-dir", &arg(out)]);
        assert_success(&run);
        assert!(String::from_utf8_lossy(&run.stdout).contains("all"));
    }
    assert_eq!(
        fs::read(g1.join("gradcheck.json")).unwrap(),
        fs::read(g2.join("gradcheck.json")).unwrap()
    );

    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    for out in [&d1, &d2] {
        assert_success(&relit(&[
            "demo-train",
            "--steps",
            "4",
            "--seed",
            "1",
            "--out-dir",
            &arg(out),
        ]));
    }
    assert_eq!(
        fs::read(d1.join("demo_report.json")).unwrap(),
        fs::read(d2.join("demo_report.json")).unwrap()
    );
}
