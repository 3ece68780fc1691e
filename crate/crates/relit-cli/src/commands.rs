//! Subcommand implementations. Each one loads its inputs, runs the core
//! operations, writes results under `--out-dir`, and reports what it read
//! and wrote so the dispatcher can record a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use relit_core::correction::{fit_lighting, CorrectionConfig, LossEntry};
use relit_core::dataset::{self, DegradeConfig, PairProvenance, TrainingPair};
use relit_core::metrics::{metric_report, MetricReport};
use relit_core::morphable::{FaceCoefficients, MorphableModel};
use relit_core::neural::{demo_train, run_gradient_checks, DemoConfig};
use relit_core::raster::{render, render_geometry, Camera, RasterConfig};
use relit_core::sh::{estimate_sh, ShCoeffs, ShDelta};
use relit_core::{RasterImage, RelitError, Result};

use crate::manifest::RunManifest;
use crate::{DegradeArgs, DemoTrainArgs, EstimateArgs, FitArgs, GradcheckArgs, MetricsArgs, RenderArgs, RerunArgs};

/// What a subcommand did, for the manifest and the process exit code.
pub struct Outcome {
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub exit: i32,
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RelitError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn load_face(model: &Path, coeffs: &Path) -> Result<(MorphableModel, FaceCoefficients)> {
    let model = MorphableModel::load_json(model)?;
    let coeffs = FaceCoefficients::load_json(coeffs)?;
    Ok((model, coeffs))
}

fn raster_config(
    width: usize,
    height: usize,
    sigma: Option<f64>,
    gamma_depth: Option<f64>,
) -> RasterConfig {
    let mut cfg = RasterConfig::new(Camera::orthographic(width, height));
    if let Some(s) = sigma {
        cfg.sigma = s;
    }
    if let Some(g) = gamma_depth {
        cfg.gamma_depth = g;
    }
    cfg
}

/// Versioned wrapper for the correction delta, which is not a standalone
/// coefficient set.
#[derive(Serialize, Deserialize)]
struct DeltaFile {
    schema_version: u32,
    delta: ShDelta,
}

#[derive(Serialize, Deserialize)]
struct LossHistoryFile {
    schema_version: u32,
    entries: Vec<LossEntry>,
}

pub fn cmd_render(args: &RenderArgs) -> Result<Outcome> {
    ensure_out_dir(&args.out_dir)?;
    let (model, coeffs) = load_face(&args.model, &args.coeffs)?;
    let sh = ShCoeffs::load_json(&args.sh)?;
    let mesh = model.evaluate(&coeffs)?;
    let (height, width) = args.size;
    let cfg = raster_config(width, height, args.sigma, args.gamma_depth);
    let out = render(&mesh, &sh, &cfg)?;
    let png = args.out_dir.join("render.png");
    out.image.save_png(&png)?;
    println!("wrote {} ({}x{})", png.display(), width, height);
    Ok(Outcome {
        seed: None,
        inputs: vec![args.model.clone(), args.coeffs.clone(), args.sh.clone()],
        outputs: vec![png],
        exit: 0,
    })
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<Outcome> {
    ensure_out_dir(&args.out_dir)?;
    let input = RasterImage::load_png(&args.input)?;
    let (model, coeffs) = load_face(&args.model, &args.coeffs)?;
    let mesh = model.evaluate(&coeffs)?;
    let cfg = raster_config(input.width(), input.height(), args.sigma, args.gamma_depth);
    let geom = render_geometry(&mesh, &cfg)?;
    let mask = geom.coverage_mask(0.5);
    let sh = estimate_sh(&input, &geom.normals, &mask, Some(&geom.albedo))?;
    let path = args.out_dir.join("sh_estimate.json");
    sh.save_json(&path)?;
    println!("wrote {}", path.display());
    Ok(Outcome {
        seed: None,
        inputs: vec![args.model.clone(), args.coeffs.clone(), args.input.clone()],
        outputs: vec![path],
        exit: 0,
    })
}

/// Shared body of `correct` and `pipeline`: fit the bi-branch correction
/// and write the coefficient family, loss history, and guidance render.
fn fit_and_emit(
    args: &FitArgs,
    write_initial_estimate: bool,
) -> Result<(Outcome, RasterImage, RasterImage, Option<RasterImage>)> {
    ensure_out_dir(&args.out_dir)?;
    let i_s = RasterImage::load_png(&args.input)?;
    let i_t = args
        .target
        .as_ref()
        .map(|p| RasterImage::load_png(p))
        .transpose()?;
    let (model, coeffs) = load_face(&args.model, &args.coeffs)?;
    let mesh = model.evaluate(&coeffs)?;
    let cfg_raster = raster_config(i_s.width(), i_s.height(), args.sigma, args.gamma_depth);

    let mut outputs = Vec::new();
    if write_initial_estimate {
        let geom = render_geometry(&mesh, &cfg_raster)?;
        let mask = geom.coverage_mask(0.5);
        // same fallback as the fit's initialization, so the file always
        // matches eps_est at step 0
        let sh = match estimate_sh(&i_s, &geom.normals, &mask, Some(&geom.albedo)) {
            Ok(sh) => sh,
            Err(RelitError::RankDeficient(_)) => {
                ShCoeffs::ambient(i_s.masked_mean_luma(&mask).max(0.05))
            }
            Err(e) => return Err(e),
        };
        let path = args.out_dir.join("sh_estimate.json");
        sh.save_json(&path)?;
        outputs.push(path);
    }

    let cfg = CorrectionConfig {
        lambda_crt: args.lambda_crt,
        steps: args.steps,
        step_size: args.step_size,
        seed: args.seed,
        ..CorrectionConfig::default()
    };
    let state = fit_lighting(&mesh, &cfg_raster, &i_s, i_t.as_ref(), &cfg)?;
    let eps_crt = state.eps_crt();
    let guidance = render(&mesh, &eps_crt, &cfg_raster)?.image;

    let eps_est_path = args.out_dir.join("eps_est.json");
    state.eps_est.save_json(&eps_est_path)?;
    let delta_path = args.out_dir.join("delta_sh.json");
    write_json(
        &delta_path,
        &DeltaFile {
            schema_version: 1,
            delta: state.delta_sh.clone(),
        },
    )?;
    let eps_crt_path = args.out_dir.join("eps_crt.json");
    eps_crt.save_json(&eps_crt_path)?;
    let history_path = args.out_dir.join("loss_history.json");
    write_json(
        &history_path,
        &LossHistoryFile {
            schema_version: 1,
            entries: state.loss_history.clone(),
        },
    )?;
    let guidance_path = args.out_dir.join("guidance.png");
    guidance.save_png(&guidance_path)?;
    outputs.extend([eps_est_path, delta_path, eps_crt_path, history_path, guidance_path]);

    let last = state.loss_history.last().expect("non-empty history");
    println!(
        "fit {} steps, final loss {:.6e} (est {:.6e}, crt {:.6e})",
        args.steps, last.total, last.term_est, last.term_crt
    );

    let mut inputs = vec![args.model.clone(), args.coeffs.clone(), args.input.clone()];
    if let Some(t) = &args.target {
        inputs.push(t.clone());
    }
    let outcome = Outcome {
        seed: Some(args.seed),
        inputs,
        outputs,
        exit: 0,
    };
    Ok((outcome, i_s, guidance, i_t))
}

pub fn cmd_correct(args: &FitArgs) -> Result<Outcome> {
    let (outcome, _, _, _) = fit_and_emit(args, false)?;
    Ok(outcome)
}

pub fn cmd_pipeline(args: &FitArgs) -> Result<Outcome> {
    let (mut outcome, i_s, guidance, i_t) = fit_and_emit(args, true)?;
    if let Some(target) = &i_t {
        let report = metric_report(&[
            ("guidance_vs_target", &guidance, target),
            ("input_vs_target", &i_s, target),
        ])?;
        outcome.outputs.extend(emit_metrics(&report, &args.out_dir)?);
    }
    Ok(outcome)
}

/// Format a PSNR value for the CSV table; infinities print as `inf`.
fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write `metrics.json` and `metrics.csv` and print the table.
fn emit_metrics(report: &MetricReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let json_path = out_dir.join("metrics.json");
    write_json(&json_path, report)?;
    let mut table = String::from("name,psnr_db,ssim\n");
    for row in &report.per_image {
        table.push_str(&format!(
            "{},{},{:.6}\n",
            csv_field(&row.name),
            fmt_db(row.psnr_db),
            row.ssim
        ));
    }
    table.push_str(&format!(
        "mean,{},{:.6}\n",
        fmt_db(report.psnr_db),
        report.ssim
    ));
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, &table)?;
    print!("{table}");
    Ok(vec![json_path, csv_path])
}

/// Sorted stems of the `.png` files directly inside `dir`.
fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().and_then(|e| e.to_str()) == Some("png");
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<Outcome> {
    ensure_out_dir(&args.out_dir)?;
    let mut inputs = vec![args.input.clone(), args.target.clone()];
    let pairs: Vec<(String, RasterImage, RasterImage)> =
        if args.input.is_dir() && args.target.is_dir() {
            let stems = png_stems(&args.input)?;
            if stems.is_empty() {
                return Err(RelitError::InvalidArgument(format!(
                    "no .png files in {}",
                    args.input.display()
                )));
            }
            let mut pairs = Vec::with_capacity(stems.len());
            for stem in stems {
                let a_path = args.input.join(format!("{stem}.png"));
                let b_path = args.target.join(format!("{stem}.png"));
                if !b_path.is_file() {
                    return Err(RelitError::InvalidArgument(format!(
                        "no counterpart for {stem}.png in {}",
                        args.target.display()
                    )));
                }
                let a = RasterImage::load_png(&a_path)?;
                let b = RasterImage::load_png(&b_path)?;
                inputs.push(a_path);
                inputs.push(b_path);
                pairs.push((stem, a, b));
            }
            pairs
        } else if args.input.is_dir() || args.target.is_dir() {
            return Err(RelitError::InvalidArgument(
                "--input and --target must both be files or both be directories".into(),
            ));
        } else {
            let a = RasterImage::load_png(&args.input)?;
            let b = RasterImage::load_png(&args.target)?;
            pairs_name_for_files(&args.input, a, b)
        };
    let refs: Vec<(&str, &RasterImage, &RasterImage)> = pairs
        .iter()
        .map(|(name, a, b)| (name.as_str(), a, b))
        .collect();
    let report = metric_report(&refs)?;
    let outputs = emit_metrics(&report, &args.out_dir)?;
    Ok(Outcome {
        seed: None,
        inputs,
        outputs,
        exit: 0,
    })
}

fn pairs_name_for_files(
    input: &Path,
    a: RasterImage,
    b: RasterImage,
) -> Vec<(String, RasterImage, RasterImage)> {
    let name = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("pair")
        .to_string();
    vec![(name, a, b)]
}

/// Per-image degrade input: the coefficients that explain the photo's
/// geometry plus its (estimated or known) lighting.
#[derive(Serialize, Deserialize)]
struct TargetSidecar {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    coeffs: FaceCoefficients,
    sh: ShCoeffs,
}

fn default_schema_version() -> u32 {
    1
}

/// Full record written next to each emitted pair.
#[derive(Serialize, Deserialize)]
struct PairRecord {
    schema_version: u32,
    name: String,
    split: String,
    pair_seed: u64,
    input_brightness: f64,
    sh_input: ShCoeffs,
    sh_target: ShCoeffs,
    provenance: PairProvenance,
}

#[derive(Serialize, Deserialize)]
struct DatasetEntry {
    name: String,
    /// "train", "val", or "filtered" for pairs dropped by the brightness
    /// floor.
    split: String,
    pair_seed: u64,
    lambda_used: f64,
    input_brightness: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetSummary {
    schema_version: u32,
    seed: u64,
    split_fraction: f64,
    config: DegradeConfig,
    mean_sh: ShCoeffs,
    pairs: Vec<DatasetEntry>,
}

pub fn cmd_degrade(args: &DegradeArgs) -> Result<Outcome> {
    if !(0.0..=1.0).contains(&args.split) {
        return Err(RelitError::InvalidArgument(format!(
            "--split must lie in [0, 1], got {}",
            args.split
        )));
    }
    ensure_out_dir(&args.out_dir)?;
    let model = MorphableModel::load_json(&args.model)?;
    let stems = png_stems(&args.input)?;
    if stems.is_empty() {
        return Err(RelitError::InvalidArgument(format!(
            "no .png targets in {}",
            args.input.display()
        )));
    }

    struct Loaded {
        name: String,
        image: RasterImage,
        coeffs: FaceCoefficients,
        sh: ShCoeffs,
    }
    let mut inputs = vec![args.model.clone()];
    let mut loaded = Vec::with_capacity(stems.len());
    for stem in &stems {
        let png_path = args.input.join(format!("{stem}.png"));
        let sidecar_path = args.input.join(format!("{stem}.json"));
        let image = RasterImage::load_png(&png_path)?;
        let sidecar: TargetSidecar = read_json(&sidecar_path)?;
        inputs.push(png_path);
        inputs.push(sidecar_path);
        loaded.push(Loaded {
            name: stem.clone(),
            image,
            coeffs: sidecar.coeffs,
            sh: sidecar.sh,
        });
    }

    let all_sh: Vec<ShCoeffs> = loaded.iter().map(|l| l.sh.clone()).collect();
    let mean = dataset::mean_sh(&all_sh)?;
    let base_cfg = match &args.degrade_config {
        Some(path) => {
            let mut cfg: DegradeConfig = read_json(path)?;
            cfg.seed = args.seed;
            inputs.push(path.clone());
            cfg
        }
        None => DegradeConfig::for_mean(&mean, args.seed),
    };
    base_cfg.validate()?;

    let mut built: Vec<(String, TrainingPair, u64)> = Vec::with_capacity(loaded.len());
    for (idx, item) in loaded.iter().enumerate() {
        let mesh = model.evaluate(&item.coeffs)?;
        let cfg_raster = raster_config(item.image.width(), item.image.height(), None, None);
        let geom = render_geometry(&mesh, &cfg_raster)?;
        let mut cfg = base_cfg.clone();
        cfg.seed = args.seed ^ idx as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (sh_input, lambda_used, ideal_point) =
            dataset::degrade_sh(&item.sh, &mean, &cfg, &mut rng);
        let reshaded = dataset::reshade_image(&item.image, &geom.normals, &item.sh, &sh_input)?;
        let shading = dataset::shading_map(&geom.normals, &sh_input)?;
        let degraded = dataset::apply_darkness_degradation(&reshaded, &shading, &cfg, &mut rng)?;
        let pair = TrainingPair {
            input_image: degraded,
            target_image: item.image.clone(),
            sh_input,
            sh_target: item.sh.clone(),
            provenance: PairProvenance {
                schema_version: 1,
                config: cfg.clone(),
                lambda_used,
                ideal_point,
            },
        };
        built.push((item.name.clone(), pair, cfg.seed));
    }

    let kept_flags: Vec<bool> = built
        .iter()
        .map(|(_, pair, _)| pair.passes_brightness_filter())
        .collect();
    let kept_total = kept_flags.iter().filter(|k| **k).count();
    let n_train = (args.split * kept_total as f64).round() as usize;

    let mut outputs = Vec::new();
    let mut entries = Vec::with_capacity(built.len());
    let mut kept_index = 0usize;
    for ((name, pair, pair_seed), kept) in built.iter().zip(&kept_flags) {
        let split = if !kept {
            "filtered"
        } else if kept_index < n_train {
            "train"
        } else {
            "val"
        };
        if *kept {
            kept_index += 1;
            let dir = args.out_dir.join(split);
            fs::create_dir_all(&dir)?;
            let input_png = dir.join(format!("{name}_input.png"));
            let target_png = dir.join(format!("{name}_target.png"));
            pair.input_image.save_png(&input_png)?;
            pair.target_image.save_png(&target_png)?;
            let record_path = dir.join(format!("{name}_pair.json"));
            write_json(
                &record_path,
                &PairRecord {
                    schema_version: 1,
                    name: name.clone(),
                    split: split.to_string(),
                    pair_seed: *pair_seed,
                    input_brightness: pair.input_brightness(),
                    sh_input: pair.sh_input.clone(),
                    sh_target: pair.sh_target.clone(),
                    provenance: pair.provenance.clone(),
                },
            )?;
            outputs.extend([input_png, target_png, record_path]);
        }
        entries.push(DatasetEntry {
            name: name.clone(),
            split: split.to_string(),
            pair_seed: *pair_seed,
            lambda_used: pair.provenance.lambda_used,
            input_brightness: pair.input_brightness(),
        });
    }

    let summary_path = args.out_dir.join("dataset.json");
    write_json(
        &summary_path,
        &DatasetSummary {
            schema_version: 1,
            seed: args.seed,
            split_fraction: args.split,
            config: base_cfg,
            mean_sh: mean,
            pairs: entries,
        },
    )?;
    outputs.push(summary_path);

    let filtered = built.len() - kept_total;
    println!(
        "{} pairs: {} train, {} val, {} filtered",
        built.len(),
        n_train,
        kept_total - n_train,
        filtered
    );
    Ok(Outcome {
        seed: Some(args.seed),
        inputs,
        outputs,
        exit: 0,
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    ensure_out_dir(&args.out_dir)?;
    let report = run_gradient_checks(args.seed)?;
    let path = args.out_dir.join("gradcheck.json");
    write_json(&path, &report)?;
    for entry in &report.entries {
        println!(
            "{:<28} max_rel {:>9.3e}  tol {:.0e}  {}",
            entry.name,
            entry.max_rel_error,
            entry.tolerance,
            if entry.passed { "pass" } else { "FAIL" }
        );
    }
    let exit = if report.all_passed {
        println!("all {} checks passed", report.entries.len());
        0
    } else {
        eprintln!("gradient checks failed; see {}", path.display());
        1
    };
    Ok(Outcome {
        seed: Some(args.seed),
        inputs: vec![],
        outputs: vec![path],
        exit,
    })
}

pub fn cmd_demo_train(args: &DemoTrainArgs) -> Result<Outcome> {
    ensure_out_dir(&args.out_dir)?;
    let cfg = DemoConfig {
        steps: args.steps,
        seed: args.seed,
        ..DemoConfig::default()
    };
    let report = demo_train(&cfg)?;
    let path = args.out_dir.join("demo_report.json");
    write_json(&path, &report)?;
    let first = report.first();
    let last = report.last();
    println!(
        "step 0: fm {:.4e} percep {:.4e} | step {}: fm {:.4e} percep {:.4e}",
        first.loss_fm, first.loss_percep, last.step, last.loss_fm, last.loss_percep
    );
    Ok(Outcome {
        seed: Some(args.seed),
        inputs: vec![],
        outputs: vec![path],
        exit: 0,
    })
}

/// Replay a recorded run. The stored argv is re-dispatched as-is, except
/// that `--out-dir` is rewritten when an override is given.
pub fn cmd_rerun(args: &RerunArgs) -> Result<i32> {
    let manifest = RunManifest::load(&args.manifest)?;
    if manifest.subcommand == "rerun" {
        return Err(RelitError::InvalidArgument(
            "manifest records a rerun; rerun manifests are not replayable".into(),
        ));
    }
    let mut argv = manifest.argv.clone();
    if let Some(dir) = &args.out_dir {
        let mut cleaned = Vec::with_capacity(argv.len() + 2);
        let mut skip_next = false;
        for arg in &argv {
            if skip_next {
                skip_next = false;
                continue;
            }
            if arg == "--out-dir" {
                skip_next = true;
                continue;
            }
            if arg.starts_with("--out-dir=") {
                continue;
            }
            cleaned.push(arg.clone());
        }
        cleaned.push("--out-dir".into());
        cleaned.push(dir.display().to_string());
        argv = cleaned;
    }
    println!(
        "re-running `{}` from {}",
        manifest.subcommand,
        args.manifest.display()
    );
    crate::run(argv)
}
