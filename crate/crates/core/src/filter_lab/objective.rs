use crate::autodiff::{kernels, Padding, Plane, Tape, Var};
use crate::error::Result;
use crate::fusion::VmafModel;
use crate::vmaf::{score_frames, score_stream, FeatureConfig, StreamReport};

use super::apply::quantize8;

/// Stream score of `refs` against `refs * kernel`, recorded on `tape`.
///
/// Clipping follows `model.clip_enabled`.
pub fn filtered_score(
    tape: &Tape,
    refs: &[Plane],
    kernel: &Var,
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<(Var, StreamReport)> {
    let rv: Vec<Var> = refs.iter().map(|r| tape.constant(r.clone())).collect();
    let dv = rv
        .iter()
        .map(|r| tape.conv2d(r, kernel, Padding::Reflect))
        .collect::<Result<Vec<_>>>()?;
    score_stream(tape, &rv, &dv, model, cfg)
}

/// Distorted frames for a plain forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    /// Keep the real-valued convolution output.
    Smooth,
    /// Round to 8-bit levels and clamp to `[0, 255]`.
    Quantized,
}

/// Filtered frames plus the number of samples that fell outside `[0, 255]`.
pub fn filter_frames(
    refs: &[Plane],
    kernel: &Plane,
    mode: OutputMode,
) -> Result<(Vec<Plane>, usize)> {
    let mut out_of_range = 0;
    let mut dists = Vec::with_capacity(refs.len());
    for r in refs {
        let d = kernels::conv2d(r, kernel, Padding::Reflect)?;
        out_of_range += d
            .as_slice()
            .iter()
            .filter(|v| !(0.0..=255.0).contains(*v))
            .count();
        dists.push(match mode {
            OutputMode::Smooth => d,
            OutputMode::Quantized => quantize8(&d),
        });
    }
    Ok((dists, out_of_range))
}

/// Forward-only counterpart of [`filtered_score`].
pub fn filtered_score_value(
    refs: &[Plane],
    kernel: &Plane,
    model: &VmafModel,
    cfg: &FeatureConfig,
    mode: OutputMode,
) -> Result<(StreamReport, usize)> {
    let (dists, out_of_range) = filter_frames(refs, kernel, mode)?;
    Ok((score_frames(refs, &dists, model, cfg)?, out_of_range))
}
