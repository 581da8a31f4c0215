use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Plane, Tape};
use crate::error::{invalid, Error, Result};
use crate::fusion::VmafModel;
use crate::motion::motion_sequence;
use crate::vmaf::{frame_features, score_frames, FeatureConfig};

use super::apply::{alpha_for_psnr, apply_filter, mean_psnr};
use super::kernel::{unsharp_kernel, KernelFilter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kernel_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop when the batch-mean score has not improved for this many steps.
    pub patience: usize,
    /// Stop once the batch-mean pre-clip score exceeds this value (runaway guard).
    pub score_ceiling: f64,
    pub early_stop: bool,
    /// Side of the square training crops; frames smaller than this are used whole.
    pub crop_size: usize,
    pub seed: u64,
    /// Steps between validated checkpoints.
    pub checkpoint_interval: usize,
    /// Checkpoints are compared at the PSNR of unsharp masking with this amplification.
    pub reference_alpha: f64,
    /// Gaussian width of the reference unsharp mask; `0` means `kernel_size / 5`.
    pub reference_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            learning_rate: 1e-5,
            batch_size: 3,
            max_steps: 200,
            patience: 50,
            score_ceiling: 150.0,
            early_stop: true,
            crop_size: 128,
            seed: 0,
            checkpoint_interval: 10,
            reference_alpha: 0.5,
            reference_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(invalid(
                "batch_size and checkpoint_interval must be positive",
            ));
        }
        if !(self.reference_alpha > 0.0) {
            return Err(invalid("reference_alpha must be positive"));
        }
        Ok(())
    }

    pub fn reference_filter(&self) -> Result<KernelFilter> {
        let sigma = if self.reference_sigma > 0.0 {
            self.reference_sigma
        } else {
            self.kernel_size as f64 / 5.0
        };
        unsharp_kernel(self.kernel_size, sigma, self.reference_alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean pre-clip score of the batch before the update.
    pub batch_loss: f64,
    /// Kernel sum after projection.
    pub kernel_sum: f64,
    /// Larger of the transpose and quarter-turn asymmetries.
    pub symmetry_residual: f64,
}

/// Score of a filter at the reference PSNR on the validation frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedScore {
    pub alpha: f64,
    pub psnr_db: f64,
    pub vmaf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub filter: KernelFilter,
    /// Mean pre-clip score on the validation frames at `alpha = 1`.
    pub vmaf: f64,
    pub matched: MatchedScore,
    pub transpose_residual: f64,
    pub rot90_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    Ceiling,
    Patience,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights of the selected checkpoint.
    pub filter: KernelFilter,
    pub selected: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
    pub stop: StopReason,
    /// Validation score of the identity filter.
    pub initial_vmaf: f64,
    /// The unsharp reference at its own PSNR.
    pub reference: MatchedScore,
}

impl TrainOutcome {
    pub fn best(&self) -> &Checkpoint {
        &self.checkpoints[self.selected]
    }

    /// `step,batch_loss,kernel_sum,symmetry_residual`.
    pub fn write_log_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,batch_loss,kernel_sum,symmetry_residual")?;
        for r in &self.log {
            writeln!(
                out,
                "{},{},{},{}",
                r.step, r.batch_loss, r.kernel_sum, r.symmetry_residual
            )?;
        }
        Ok(())
    }
}

/// Mean pre-clip score of `refs` against `refs * filter`, motion included.
pub fn validation_score(
    refs: &[Plane],
    filter: &KernelFilter,
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<f64> {
    let dists = refs
        .iter()
        .map(|r| apply_filter(r, filter))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_frames(refs, &dists, &model.clone().with_clip(false), cfg)?.pooled)
}

fn frame_count(clips: &[Vec<Plane>]) -> Result<usize> {
    match clips.iter().map(Vec::len).sum() {
        0 => Err(invalid("at least one frame is required")),
        n => Ok(n),
    }
}

/// [`validation_score`] averaged over the frames of several clips, each scored as its own stream.
pub fn clips_score(
    clips: &[Vec<Plane>],
    filter: &KernelFilter,
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<f64> {
    let n = frame_count(clips)? as f64;
    let mut total = 0.0;
    for c in clips.iter().filter(|c| !c.is_empty()) {
        total += c.len() as f64 * validation_score(c, filter, model, cfg)?;
    }
    Ok(total / n)
}

/// Mean PSNR over the frames of several clips.
pub fn clips_psnr(clips: &[Vec<Plane>], filter: &KernelFilter) -> Result<f64> {
    let frames: Vec<Plane> = clips.iter().flatten().cloned().collect();
    frame_count(clips)?;
    mean_psnr(&frames, filter)
}

/// Score of `I + alpha * W_hat` with `alpha` chosen to hit `target_db`.
pub fn matched_score(
    clips: &[Vec<Plane>],
    filter: &KernelFilter,
    target_db: f64,
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<MatchedScore> {
    let frames: Vec<Plane> = clips.iter().flatten().cloned().collect();
    let alpha = alpha_for_psnr(&frames, filter, target_db)?;
    let f = filter.with_alpha(alpha);
    Ok(MatchedScore {
        alpha,
        psnr_db: mean_psnr(&frames, &f)?,
        vmaf: clips_score(clips, &f, model, cfg)?,
    })
}

struct Sample {
    clip: usize,
    frame: usize,
    top: usize,
    left: usize,
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    frames: &[(usize, usize)],
    clips: &[Vec<Plane>],
    cfg: &TrainConfig,
) -> Vec<Sample> {
    (0..cfg.batch_size)
        .map(|_| {
            let (clip, frame) = frames[rng.gen_range(0..frames.len())];
            let (rows, cols) = clips[clip][frame].shape();
            let top = rng.gen_range(0..=rows - cfg.crop_size.min(rows));
            let left = rng.gen_range(0..=cols - cfg.crop_size.min(cols));
            Sample {
                clip,
                frame,
                top,
                left,
            }
        })
        .collect()
}

/// Score and kernel gradient of one training crop on its own tape.
fn crop_gradient(
    crop: &Plane,
    motion: f64,
    kernel: &Plane,
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<(f64, Plane)> {
    let tape = Tape::new();
    let w = tape.param(kernel.clone());
    let r = tape.constant(crop.clone());
    let d = tape.conv2d(&r, &w, Padding::Reflect)?;
    let feats = frame_features(&tape, &r, &d, tape.scalar(motion), cfg)?;
    let s = model.predict_frame(&tape, &feats)?;
    let g = tape.backward(&s)?;
    Ok((s.item(), g.wrt(&w)))
}

/// Maximises the summed score of `R * W` over random crops of the clip frames by
/// gradient ascent, renormalising `W` to unit sum after every step.
///
/// The gradient is projected onto the zero-sum subspace before the step, so
/// the renormalisation only removes rounding drift.
///
/// Clipping is always disabled. Checkpoints are ranked by their validation
/// score at the PSNR of the reference unsharp mask.
pub fn train_filter(
    clips: &[Vec<Plane>],
    model: &VmafModel,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    frame_count(clips)?;
    let model = model.clone().with_clip(false);
    model.validate()?;
    let fcfg = fcfg.for_model(&model);
    let mut motions = Vec::with_capacity(clips.len());
    for c in clips {
        motions.push(if c.is_empty() {
            Vec::new()
        } else {
            motion_sequence(c, &fcfg.motion)?
        });
    }
    let index: Vec<(usize, usize)> = clips
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.len()).map(move |j| (i, j)))
        .collect();

    let reference = cfg.reference_filter()?;
    let target_db = clips_psnr(clips, &reference)?;
    let reference = MatchedScore {
        alpha: cfg.reference_alpha,
        psnr_db: target_db,
        vmaf: clips_score(clips, &reference, &model, &fcfg)?,
    };
    let mut kernel = KernelFilter::identity(cfg.kernel_size)?;
    let initial_vmaf = clips_score(clips, &kernel, &model, &fcfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut checkpoints = Vec::new();
    let mut best_batch = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stop = StopReason::MaxSteps;

    for step in 0..cfg.max_steps {
        let batch = draw_batch(&mut rng, &index, clips, cfg);
        let crops = batch
            .iter()
            .map(|s| {
                let f = &clips[s.clip][s.frame];
                let side = |n: usize| cfg.crop_size.min(n);
                f.crop(s.top, s.left, side(f.rows()), side(f.cols()))
            })
            .collect::<Result<Vec<_>>>()?;
        let results = crops
            .par_iter()
            .zip(&batch)
            .map(|(c, s)| {
                crop_gradient(c, motions[s.clip][s.frame], kernel.weights(), &model, &fcfg)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut total = 0.0;
        let mut grad = Plane::zeros(cfg.kernel_size, cfg.kernel_size);
        for (s, g) in &results {
            total += s;
            grad = grad.zip_map(g, |a, b| a + b);
        }
        let batch_loss = total / results.len() as f64;
        if !batch_loss.is_finite() || grad.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingAborted {
                step,
                reason: "score or gradient is not finite".into(),
            });
        }

        let mean_grad = grad.sum() / grad.as_slice().len() as f64;
        let stepped = kernel
            .weights()
            .zip_map(&grad, |w, g| w + cfg.learning_rate * (g - mean_grad));
        let sum = stepped.sum();
        if !(sum > 1e-3) {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("kernel sum {sum} leaves the positive range"),
            });
        }
        kernel = KernelFilter::from_weights(stepped.scale(1.0 / sum))?;
        let (tr, rot) = kernel.symmetry_residuals();
        log.push(LogRow {
            step,
            batch_loss,
            kernel_sum: kernel.sum(),
            symmetry_residual: tr.max(rot),
        });
        log::debug!(
            "step {step}: batch score {batch_loss:.4}, sum {:.3e}",
            kernel.sum() - 1.0
        );

        if batch_loss > best_batch {
            best_batch = batch_loss;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let halt = if !cfg.early_stop {
            None
        } else if batch_loss > cfg.score_ceiling {
            Some(StopReason::Ceiling)
        } else if cfg.patience > 0 && since_best >= cfg.patience {
            Some(StopReason::Patience)
        } else {
            None
        };
        let last = halt.is_some() || step + 1 == cfg.max_steps;
        if ((step + 1) % cfg.checkpoint_interval == 0 || last) && kernel.residual().max_abs() > 0.0
        {
            checkpoints.push(Checkpoint {
                step,
                vmaf: clips_score(clips, &kernel, &model, &fcfg)?,
                matched: matched_score(clips, &kernel, target_db, &model, &fcfg)?,
                filter: kernel.clone(),
                transpose_residual: tr,
                rot90_residual: rot,
            });
        }
        if let Some(h) = halt {
            stop = h;
            break;
        }
    }

    let selected = checkpoints
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, c)| match best {
            Some((_, v)) if v >= c.matched.vmaf => best,
            _ => Some((i, c.matched.vmaf)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| {
            Error::InvalidState(
                "training produced no checkpoint that differs from the identity".into(),
            )
        })?;
    let filter = checkpoints[selected].filter.clone();
    Ok(TrainOutcome {
        filter,
        selected,
        checkpoints,
        log,
        stop,
        initial_vmaf,
        reference,
    })
}
