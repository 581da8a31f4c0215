//! Temporal activity of the reference stream.
//!
//! Each frame is smoothed with a 5x5 Gaussian, and the feature for frame `i`
//! is `min(SAD(i, i-1), SAD(i, i+1))`. The first frame scores 0 and the last
//! frame only looks back.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Padding, Plane, Tape, Var};
use crate::error::{invalid, Result};

pub const MOTION_TAPS: [f64; 5] = [
    0.054488685,
    0.244201342,
    0.402619947,
    0.244201342,
    0.054488685,
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Report the raw sum of absolute differences instead of the per-pixel mean.
    pub raw_sum: bool,
}

/// Outer product of [`MOTION_TAPS`], normalised to unit sum.
pub fn motion_kernel() -> Plane {
    let k = Plane::from_fn(5, 5, |r, c| MOTION_TAPS[r] * MOTION_TAPS[c]);
    let s = k.sum();
    k.scale(1.0 / s)
}

pub fn blur_frame(frame: &Plane) -> Result<Plane> {
    kernels::conv2d(frame, &motion_kernel(), Padding::Reflect)
}

fn sad(a: &Plane, b: &Plane, cfg: &MotionConfig) -> f64 {
    let total: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum();
    if cfg.raw_sum {
        total
    } else {
        total / a.as_slice().len() as f64
    }
}

fn check_frames(shapes: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let mut first = None;
    for s in shapes {
        match first {
            None => first = Some(s),
            Some(f) if f != s => {
                return Err(invalid(format!(
                    "motion: frame shapes differ ({f:?} vs {s:?})"
                )))
            }
            _ => {}
        }
    }
    if first.is_none() {
        return Err(invalid("motion needs at least one frame"));
    }
    Ok(())
}

/// Motion of frame `index` as a tape expression.
pub fn motion(tape: &Tape, frames: &[Var], index: usize, cfg: &MotionConfig) -> Result<Var> {
    check_frames(frames.iter().map(Var::shape))?;
    if index >= frames.len() {
        return Err(invalid(format!(
            "motion: frame {index} out of range for {} frames",
            frames.len()
        )));
    }
    if index == 0 {
        return Ok(tape.scalar(0.0));
    }
    let kernel = tape.constant(motion_kernel());
    let blur = |v: &Var| tape.conv2d(v, &kernel, Padding::Reflect);
    let cur = blur(&frames[index])?;
    let sad_to = |other: &Var| -> Result<Var> {
        let d = tape.abs(&tape.sub(&cur, &blur(other)?)?)?;
        if cfg.raw_sum {
            tape.sum(&d)
        } else {
            tape.mean(&d)
        }
    };
    let back = sad_to(&frames[index - 1])?;
    match frames.get(index + 1) {
        Some(next) => tape.min(&back, &sad_to(next)?),
        None => Ok(back),
    }
}

/// Motion values for a whole in-memory sequence.
pub fn motion_sequence(frames: &[Plane], cfg: &MotionConfig) -> Result<Vec<f64>> {
    check_frames(frames.iter().map(Plane::shape))?;
    let mut state = MotionState::new(cfg.clone());
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        out.extend(state.push(f)?);
    }
    out.extend(state.finish());
    Ok(out)
}

/// Streaming evaluator holding only the previous blurred frame.
///
/// Each [`MotionState::push`] returns the motion of the frame before it once
/// its successor is known; [`MotionState::finish`] emits the last one.
#[derive(Debug, Clone)]
pub struct MotionState {
    cfg: MotionConfig,
    prev_blurred: Option<Plane>,
    /// SAD between the last two pushed frames.
    prev_sad: Option<f64>,
    pushed: usize,
}

impl MotionState {
    pub fn new(cfg: MotionConfig) -> Self {
        Self {
            cfg,
            prev_blurred: None,
            prev_sad: None,
            pushed: 0,
        }
    }

    pub fn push(&mut self, frame: &Plane) -> Result<Option<f64>> {
        let blurred = blur_frame(frame)?;
        let emitted = match &self.prev_blurred {
            None => None,
            Some(prev) => {
                if prev.shape() != blurred.shape() {
                    return Err(invalid(format!(
                        "motion: frame shapes differ ({:?} vs {:?})",
                        prev.shape(),
                        blurred.shape()
                    )));
                }
                let s = sad(&blurred, prev, &self.cfg);
                let out = match self.prev_sad {
                    None => 0.0,
                    Some(back) => back.min(s),
                };
                self.prev_sad = Some(s);
                Some(out)
            }
        };
        self.prev_blurred = Some(blurred);
        self.pushed += 1;
        Ok(emitted)
    }

    /// Motion of the final frame, or `None` if nothing was pushed.
    pub fn finish(&mut self) -> Option<f64> {
        let out = match self.pushed {
            0 => None,
            1 => Some(0.0),
            _ => self.prev_sad,
        };
        *self = Self::new(self.cfg.clone());
        out
    }
}
