//! `relit`: file-based driver for the portrait relighting toolkit.
//!
//! Every subcommand reads PNG/JSON inputs, writes its results under
//! `--out-dir`, and records a `manifest.json` there describing the run.
//! Identical invocations produce byte-identical primary outputs; `rerun`
//! replays a manifest. Exit codes: 0 success, 2 input or validation
//! problem, 1 internal numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::sync::Once;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use relit_core::Result;

#[derive(Parser)]
#[command(
    name = "relit",
    version,
    about = "Portrait relighting toolkit: rendering, lighting correction, dataset synthesis, evaluation"
)]
struct Cli {
    /// Cap internal worker threads (0 or unset: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Render a face model under given lighting coefficients.
    Render(RenderArgs),
    /// Estimate lighting coefficients from an image with known geometry.
    Estimate(EstimateArgs),
    /// Fit the bi-branch lighting correction on an input image.
    Correct(FitArgs),
    /// Estimate, fit, render the guidance image, and score it.
    Pipeline(FitArgs),
    /// Synthesize degraded training pairs from well-lit targets.
    Degrade(DegradeArgs),
    /// Finite-difference checks over the neural building blocks.
    Gradcheck(GradcheckArgs),
    /// PSNR/SSIM between two images or two directories of images.
    Metrics(MetricsArgs),
    /// Train the toy enhancement network on its built-in scene.
    DemoTrain(DemoTrainArgs),
    /// Re-execute a previous run from its manifest.
    Rerun(RerunArgs),
}

/// Parse `HEIGHTxWIDTH`, e.g. `128x96`.
fn parse_size(text: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = text
        .split_once('x')
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {text:?}"))?;
    let height: usize = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    let width: usize = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    if height == 0 || width == 0 {
        return Err("size must be positive".into());
    }
    Ok((height, width))
}

#[derive(Args, Serialize)]
pub struct RenderArgs {
    /// Face model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Face coefficients JSON.
    #[arg(long)]
    pub coeffs: PathBuf,
    /// Lighting coefficients JSON.
    #[arg(long)]
    pub sh: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Output size as HEIGHTxWIDTH.
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Distance-sigmoid sharpness override, in squared pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Depth softmax temperature override.
    #[arg(long)]
    pub gamma_depth: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub coeffs: PathBuf,
    /// Image to estimate lighting from.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub gamma_depth: Option<f64>,
}

/// Flags shared by `correct` and `pipeline`.
#[derive(Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub coeffs: PathBuf,
    /// Poorly lit input image.
    #[arg(long)]
    pub input: PathBuf,
    /// Well-lit reference; enables the correction branch and metrics.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps; 0 keeps the initial lighting estimate.
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    /// Weight of the correction-branch loss term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_crt: f64,
    /// Optimizer step size.
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub gamma_depth: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct DegradeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of well-lit target PNGs with JSON sidecars.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of kept pairs assigned to train/ (the rest go to val/).
    #[arg(long, default_value_t = 1.0)]
    pub split: f64,
    /// Degradation config JSON overriding the derived defaults.
    #[arg(long)]
    pub degrade_config: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct MetricsArgs {
    /// Image file or directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    /// Reference file or directory; directory mode pairs by file name.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct DemoTrainArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct RerunArgs {
    /// Manifest written by a previous run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Redirect outputs instead of the recorded directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

static INIT: Once = Once::new();

fn init_process(threads: Option<usize>) {
    INIT.call_once(|| {
        env_logger::Builder::from_env(env_logger::Env::new().filter("RELIT_LOG")).init();
        if let Some(n) = threads {
            if n > 0 {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("thread pool already configured: {e}");
                }
            }
        }
    });
}

/// Parse and dispatch one command line; reused by `rerun`.
pub(crate) fn run(argv: Vec<String>) -> Result<i32> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap picks the stream and the code (2 usage, 0 for --help)
            let code = e.exit_code();
            let _ = e.print();
            return Ok(code);
        }
    };
    init_process(cli.threads);

    let started = Instant::now();
    let (name, out_dir, config, outcome) = match &cli.command {
        Commands::Render(a) => ("render", a.out_dir.clone(), snapshot(a)?, commands::cmd_render(a)?),
        Commands::Estimate(a) => (
            "estimate",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_estimate(a)?,
        ),
        Commands::Correct(a) => (
            "correct",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_correct(a)?,
        ),
        Commands::Pipeline(a) => (
            "pipeline",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_pipeline(a)?,
        ),
        Commands::Degrade(a) => (
            "degrade",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_degrade(a)?,
        ),
        Commands::Gradcheck(a) => (
            "gradcheck",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_gradcheck(a)?,
        ),
        Commands::Metrics(a) => (
            "metrics",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_metrics(a)?,
        ),
        Commands::DemoTrain(a) => (
            "demo-train",
            a.out_dir.clone(),
            snapshot(a)?,
            commands::cmd_demo_train(a)?,
        ),
        Commands::Rerun(a) => return commands::cmd_rerun(a),
    };

    let record = manifest::RunManifest {
        schema_version: 1,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: name.to_string(),
        argv,
        seed: outcome.seed,
        config,
        inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome
            .outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    record.write_atomic(&out_dir)?;
    Ok(outcome.exit)
}

fn snapshot<T: Serialize>(args: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(args)?)
}

fn main() {
    let exit = match run(std::env::args().collect()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_internal() {
                1
            } else {
                2
            }
        }
    };
    std::process::exit(exit);
}
