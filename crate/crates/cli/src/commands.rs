//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pyrexpose::imaging::{load_image, save_image, synthesize_dataset, synthetic, DatasetManifest, Split, DEFAULT_EVS};
use pyrexpose::infer::{correct, load_corrector, DEFAULT_MAX_DIM};
use pyrexpose::metrics::{niqe_fit, MetricsReport, NiqeModel, NIQE_MIN_PRISTINE};
use pyrexpose::pyramid::{laplacian_collapse, laplacian_decompose, visualize_level, ScaleVector};
use pyrexpose::trainer::{self, TrainRun};

use crate::service::{self, ServiceConfig, DEFAULT_MAX_UPLOAD_BYTES};

#[derive(Debug, Parser)]
#[command(name = "pyrexpose", version, about = "Multi-scale exposure correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run description.
    Train(TrainArgs),
    /// Correct one image.
    Correct(CorrectArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Render exposure variants of source images and write a manifest.
    Synth(SynthArgs),
    /// Write the Laplacian pyramid of an image for inspection.
    Pyramid(PyramidArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run description (manifest, output_dir, model, stages, ...).
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from the checkpoint in the output directory if present.
    #[arg(long)]
    pub resume: bool,
    /// Overrides the seed in the run description.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Comma-separated per-level scales; defaults to the model's.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f32>>,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    pub max_dim: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Pre-fitted NIQE model (JSON). Without it one is fitted on the
    /// manifest's train targets when there are enough of them.
    #[arg(long)]
    pub niqe_model: Option<PathBuf>,
    /// Where to save a freshly fitted NIQE model.
    #[arg(long)]
    pub save_niqe: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f32>>,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    pub max_dim: usize,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long, alias = "output")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of well-exposed PNG/PPM sources.
    #[arg(long, required_unless_present = "generate", conflicts_with = "generate")]
    pub src_dir: Option<PathBuf>,
    /// Generate this many procedural sources instead of reading a directory.
    #[arg(long)]
    pub generate: Option<usize>,
    /// Side length of generated sources.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Manifest path; defaults to `<out_dir>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub evs: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Seed for generated sources.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PyramidArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD_BYTES)]
    pub max_upload_bytes: usize,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a).map(|_| ()),
        Command::Pyramid(a) => cmd_pyramid(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn scales_for(given: Option<Vec<f32>>, defaults: &ScaleVector) -> Result<ScaleVector> {
    match given {
        None => Ok(defaults.clone()),
        Some(v) if v.len() != defaults.len() => {
            bail!("expected {} scales, got {}", defaults.len(), v.len())
        }
        Some(v) => Ok(ScaleVector::new(v)?),
    }
}

fn positive_max_dim(max_dim: usize) -> Result<()> {
    if max_dim == 0 {
        bail!("--max-dim must be positive");
    }
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut run: TrainRun =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    for p in [&mut run.manifest, &mut run.output_dir] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    run.resolve()?;
    let summary = trainer::train(&run, args.resume)?;
    if let Some(last) = summary.epochs.last() {
        log::info!(
            "finished after {} steps: train psnr {:.2} dB (input {:.2} dB)",
            summary.steps.len(),
            last.train_psnr,
            last.input_psnr
        );
    }
    println!("{}", run.output_dir.join(trainer::FINAL_FILE).display());
    Ok(())
}

pub fn cmd_correct(args: CorrectArgs) -> Result<()> {
    positive_max_dim(args.max_dim)?;
    let model = load_corrector(&args.checkpoint)?;
    let scales = scales_for(args.scales, &model.config().scale_defaults)?;
    let img = load_image(&args.input)?;
    let out = correct(&img, &model, &scales, args.max_dim)?;
    save_image(&out.image, &args.output)?;
    log::info!("{:?} path, {:.1} ms", out.route, out.timings.total_ms);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ImageReport {
    pub input: PathBuf,
    pub target: PathBuf,
    pub relative_ev: f64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub images: Vec<ImageReport>,
    /// Means over `images`.
    pub aggregate: MetricsReport,
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    positive_max_dim(args.max_dim)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let split = Split::from(args.split);
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        bail!("{} has no {split:?} entries", args.manifest.display());
    }
    let model = load_corrector(&args.checkpoint)?;
    let scales = scales_for(args.scales, &model.config().scale_defaults)?;
    let niqe_model = match &args.niqe_model {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str::<NiqeModel>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => fit_niqe(&manifest)?,
    };
    if let (Some(m), Some(p)) = (&niqe_model, &args.save_niqe) {
        fs::write(p, serde_json::to_string_pretty(m)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut images = Vec::with_capacity(entries.len());
    for e in entries {
        let input = load_image(&e.input_path)?;
        let target = load_image(&e.target_path)?;
        let out = correct(&input, &model, &scales, args.max_dim)?.image;
        images.push(ImageReport {
            input: e.input_path.clone(),
            target: e.target_path.clone(),
            relative_ev: e.relative_ev,
            metrics: MetricsReport::compute(&out, &target, niqe_model.as_ref(), None)?,
        });
    }
    let k = images.len() as f64;
    let mean = |f: fn(&MetricsReport) -> Option<f64>| {
        let v: Vec<f64> = images.iter().filter_map(|r| f(&r.metrics)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let aggregate = MetricsReport {
        psnr: images.iter().map(|r| r.metrics.psnr).sum::<f64>() / k,
        ssim: images.iter().map(|r| r.metrics.ssim).sum::<f64>() / k,
        niqe: mean(|m| m.niqe),
        pi: mean(|m| m.pi),
    };
    let report = EvalReport {
        checkpoint: args.checkpoint,
        split,
        images,
        aggregate,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Fits NIQE on the distinct train targets, or returns `None` when there are
/// too few of them.
fn fit_niqe(manifest: &DatasetManifest) -> Result<Option<NiqeModel>> {
    let mut paths: Vec<&Path> = manifest.split(Split::Train).map(|e| e.target_path.as_path()).collect();
    paths.sort();
    paths.dedup();
    if paths.len() < NIQE_MIN_PRISTINE {
        log::warn!(
            "only {} pristine targets (need {NIQE_MIN_PRISTINE}); skipping NIQE",
            paths.len()
        );
        return Ok(None);
    }
    let images = paths.iter().map(load_image).collect::<pyrexpose::Result<Vec<_>>>()?;
    Ok(Some(niqe_fit(&images)?))
}

pub fn cmd_synth(args: SynthArgs) -> Result<DatasetManifest> {
    let evs = args.evs.unwrap_or_else(|| DEFAULT_EVS.to_vec());
    if evs.is_empty() {
        bail!("--evs is empty");
    }
    let src_dir = match (args.src_dir, args.generate) {
        (Some(dir), _) => dir,
        (None, Some(count)) => {
            if count == 0 || args.size < 8 {
                bail!("--generate needs a positive count and --size of at least 8");
            }
            let dir = args.out_dir.join("sources");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            for i in 0..count {
                let img = synthetic::scene(args.size, args.size, rng.gen());
                save_image(&img, dir.join(format!("scene{i:04}.png")))?;
            }
            dir
        }
        (None, None) => bail!("either --src-dir or --generate is required"),
    };
    let manifest = synthesize_dataset(&src_dir, &args.out_dir, &evs, args.split.into())?;
    let path = args.manifest.unwrap_or_else(|| args.out_dir.join("manifest.json"));
    manifest.save(&path)?;
    println!("{} entries -> {}", manifest.entries.len(), path.display());
    Ok(manifest)
}

pub fn cmd_pyramid(args: PyramidArgs) -> Result<()> {
    if args.levels == 0 {
        bail!("--levels must be positive");
    }
    let img = load_image(&args.input)?;
    let pyr = laplacian_decompose(&img, args.levels)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for i in 0..pyr.len() {
        save_image(&visualize_level(&pyr, i), args.out_dir.join(format!("level{}.png", i + 1)))?;
    }
    let back = laplacian_collapse(&pyr)?;
    save_image(&back, args.out_dir.join("reconstruction.png"))?;
    let mut out = std::io::stdout();
    writeln!(out, "max reconstruction error {:.3e}", back.max_abs_diff(&img))?;
    Ok(())
}

pub fn cmd_serve(args: ServeArgs) -> Result<()> {
    if args.max_upload_bytes == 0 {
        bail!("--max-upload-bytes must be positive");
    }
    let config = ServiceConfig {
        bind: args.bind,
        checkpoint: args.checkpoint,
        max_upload_bytes: args.max_upload_bytes,
        default_scales: args.scales.map(ScaleVector::new).transpose()?,
    };
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(service::serve(config))
}
