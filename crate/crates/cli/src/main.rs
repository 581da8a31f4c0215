use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vmaf_grad::config::RunConfig;
use vmaf_grad::filter_lab::{
    alpha_sweep, filter_luma, train_filter, unsharp_kernel, write_sweep_csv, KernelFilter,
};
use vmaf_grad::fusion::VmafModel;
use vmaf_grad::gradcheck::{gradcheck_report, ExternalScorer};
use vmaf_grad::media::{RawVideo, YuvFormat, YuvWriter};
use vmaf_grad::vmaf::StreamScorer;
use vmaf_grad::Plane;

/// Version tag of the line printed by `score`.
const SCORE_LINE_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "vmaf-grad", version, about = "Differentiable VMAF tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a distorted stream against its reference.
    Score(ScoreArgs),
    /// Compare backpropagated and finite-difference kernel gradients.
    Gradcheck(GradcheckArgs),
    /// Learn a preprocessing kernel from every .yuv clip in a directory.
    TrainFilter(TrainArgs),
    /// Tabulate VMAF and PSNR of `I + alpha * (W - I)` over a list of alphas.
    SweepAlpha(SweepArgs),
    /// Filter the luma of a raw stream, passing chroma through.
    ApplyFilter(ApplyArgs),
}

#[derive(Args)]
struct RawArgs {
    /// Luma width in pixels.
    #[arg(long)]
    width: usize,
    /// Luma height in pixels.
    #[arg(long)]
    height: usize,
    /// Exact number of frames in each input file.
    #[arg(long)]
    frames: usize,
}

impl RawArgs {
    fn open(&self, path: &Path) -> Result<RawVideo> {
        let format = YuvFormat::new(self.width, self.height)?;
        RawVideo::open_exact(path, format, self.frames)
            .with_context(|| format!("cannot use {}", path.display()))
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Model file (own or libvmaf JSON), or `demo` / `toy` for a bundled model.
    #[arg(long, default_value = "demo")]
    model: String,
    /// TOML file with `features`, `train` and `gradcheck` sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<(VmafModel, RunConfig)> {
        let model = match self.model.as_str() {
            "demo" => VmafModel::demo(),
            "toy" => VmafModel::toy(),
            path => VmafModel::load(path).with_context(|| format!("cannot load model {path}"))?,
        };
        let cfg = match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("cannot load config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        Ok((model, cfg))
    }
}

#[derive(Args)]
struct ScoreArgs {
    reference: PathBuf,
    distorted: PathBuf,
    #[command(flatten)]
    raw: RawArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Evaluate with enhancement gain limits.
    #[arg(long)]
    neg: bool,
    /// Report the pooled score without clipping to [0, 100].
    #[arg(long)]
    no_clip: bool,
    /// Write per-frame features and scores as CSV.
    #[arg(long)]
    features_csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Raw video holding the reference frame.
    frame: PathBuf,
    #[command(flatten)]
    raw: RawArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Zero-based index of the frame to check.
    #[arg(long, default_value_t = 0)]
    frame_index: usize,
    /// Kernel side (overrides the config; default 3).
    #[arg(short = 'k', long)]
    kernel_size: Option<usize>,
    /// Finite-difference step (overrides the config; default 1e-2).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Round and clamp the filtered frame to 8-bit levels in the numeric pass.
    #[arg(long)]
    round: bool,
    /// Shell command scoring `{ref}` against `{dist}` ({width}x{height} raw 4:2:0).
    #[arg(long)]
    external_scorer: Option<String>,
    /// Write per-entry gradients as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of clips; every `.yuv` file is one clip.
    dataset: PathBuf,
    #[command(flatten)]
    raw: RawArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Where to write the selected kernel.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the per-step training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Reference clips; each is scored as its own stream.
    #[arg(required = true)]
    clips: Vec<PathBuf>,
    #[command(flatten)]
    raw: RawArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Kernel file to sweep. Without it an unsharp mask is used.
    #[arg(long)]
    filter: Option<PathBuf>,
    /// Side of the unsharp mask.
    #[arg(long, default_value_t = 7)]
    unsharp_size: usize,
    /// Gaussian width of the unsharp mask.
    #[arg(long, default_value_t = 1.4)]
    unsharp_sigma: f64,
    /// Comma-separated amplifications.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    alphas: Vec<f64>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ApplyArgs {
    input: PathBuf,
    filter: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    raw: RawArgs,
    /// Apply `I + alpha * (W - I)` instead of `W`.
    #[arg(long)]
    alpha: Option<f64>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn score(args: &ScoreArgs) -> Result<()> {
    let (mut model, cfg) = args.model.load()?;
    if args.neg {
        model.neg_mode = true;
    }
    if args.no_clip {
        model = model.with_clip(false);
    }
    let reference = args.raw.open(&args.reference)?;
    let distorted = args.raw.open(&args.distorted)?;
    let mut scorer = StreamScorer::new(model.clone(), &cfg.features)?;
    for (r, d) in reference.reader()?.zip(distorted.reader()?) {
        scorer.push(r?.luma, d?.luma)?;
    }
    let report = scorer.finish()?;
    if let Some(p) = &args.features_csv {
        let mut out = output(Some(p))?;
        report.write_features_csv(&mut out)?;
        out.flush()?;
    }
    println!(
        "vmaf-grad score v{SCORE_LINE_VERSION}: frames={} vmaf={:.6} pooled={:.6} model={} neg={} clip={}",
        report.frames.len(),
        report.score,
        report.pooled,
        model.name,
        model.neg_mode,
        model.clip_enabled
    );
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let (model, cfg) = args.model.load()?;
    let mut g = cfg.gradcheck.clone();
    if let Some(k) = args.kernel_size {
        g.kernel_size = k;
    }
    if let Some(e) = args.epsilon {
        g.epsilon = e;
    }
    g.emulate_integer_pipeline |= args.round;
    let video = args.raw.open(&args.frame)?;
    if args.frame_index >= video.frame_count {
        bail!(
            "frame index {} is beyond the {} frames of {}",
            args.frame_index,
            video.frame_count,
            args.frame.display()
        );
    }
    let frame = video
        .read_luma(args.frame_index..args.frame_index + 1)?
        .remove(0);
    let external = args
        .external_scorer
        .clone()
        .map(|command| ExternalScorer { command });
    let report = gradcheck_report(&frame, &model, &cfg.features, &g, external.as_ref())?;
    if let Some(p) = &args.csv {
        let mut out = output(Some(p))?;
        report.write_csv(&mut out)?;
        out.flush()?;
    }
    println!("{report}");
    Ok(report.passed)
}

fn read_clip(raw: &RawArgs, path: &Path) -> Result<Vec<Plane>> {
    Ok(raw.open(path)?.read_luma(0..raw.frames)?)
}

fn train(args: &TrainArgs) -> Result<()> {
    let (model, cfg) = args.model.load()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.dataset)
        .with_context(|| format!("cannot read dataset directory {}", args.dataset.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "yuv"));
    files.sort();
    if files.is_empty() {
        bail!("no .yuv files in {}", args.dataset.display());
    }
    let clips = files
        .iter()
        .map(|p| read_clip(&args.raw, p))
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_filter(&clips, &model, &cfg.features, &cfg.train)?;
    outcome.filter.save(&args.out)?;
    if let Some(p) = &args.log {
        let mut out = output(Some(p))?;
        outcome.write_log_csv(&mut out)?;
        out.flush()?;
    }
    let best = outcome.best();
    println!(
        "steps={} stop={:?} checkpoint={} vmaf={:.4} initial={:.4}",
        outcome.log.len(),
        outcome.stop,
        best.step,
        best.vmaf,
        outcome.initial_vmaf
    );
    println!(
        "at {:.3} dB: trained alpha={:.4} vmaf={:.4}, unsharp alpha={} vmaf={:.4}",
        outcome.reference.psnr_db,
        best.matched.alpha,
        best.matched.vmaf,
        outcome.reference.alpha,
        outcome.reference.vmaf
    );
    println!(
        "symmetry: transpose {:.3e} rot90 {:.3e}",
        best.transpose_residual, best.rot90_residual
    );
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let (model, cfg) = args.model.load()?;
    let filter = match &args.filter {
        Some(p) => {
            KernelFilter::load(p).with_context(|| format!("cannot load filter {}", p.display()))?
        }
        None => unsharp_kernel(args.unsharp_size, args.unsharp_sigma, 1.0)?,
    };
    let clips = args
        .clips
        .iter()
        .map(|p| read_clip(&args.raw, p))
        .collect::<Result<Vec<_>>>()?;
    let rows = alpha_sweep(&filter, &clips, &model, &cfg.features, &args.alphas)?;
    let mut out = output(args.out.as_deref())?;
    write_sweep_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn apply(args: &ApplyArgs) -> Result<()> {
    let mut filter = KernelFilter::load(&args.filter)
        .with_context(|| format!("cannot load filter {}", args.filter.display()))?;
    if let Some(a) = args.alpha {
        filter = filter.with_alpha(a);
    }
    let video = args.raw.open(&args.input)?;
    let out = File::create(&args.output)
        .with_context(|| format!("cannot create {}", args.output.display()))?;
    let mut writer = YuvWriter::new(BufWriter::new(out), video.format);
    for frame in video.reader()? {
        let frame = frame?;
        writer.write_frame(&filter_luma(&frame.luma, &filter, true)?, &frame.chroma)?;
    }
    writer.finish()?.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Score(a) => score(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::TrainFilter(a) => train(a).map(|()| true),
        Command::SweepAlpha(a) => sweep(a).map(|()| true),
        Command::ApplyFilter(a) => apply(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
