//! Full-reference score: features of every frame, regression, pooling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adm::{adm_score, AdmConfig};
use crate::autodiff::{Plane, Tape, Var};
use crate::error::{invalid, Result};
use crate::fusion::{FeatureVars, FrameFeatures, VmafModel};
use crate::motion::{motion, motion_sequence, MotionConfig, MotionState};
use crate::vif::{vif_features, VifConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub vif: VifConfig,
    pub adm: AdmConfig,
    pub motion: MotionConfig,
}

impl FeatureConfig {
    /// Takes the NEG switch and gain limits from `model`.
    pub fn for_model(&self, model: &VmafModel) -> Self {
        let mut c = self.clone();
        c.vif.neg_mode = model.neg_mode;
        c.vif.egl_vif = model.egl_vif;
        c.adm.neg_mode = model.neg_mode;
        c.adm.egl_dlm = model.egl_dlm;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.vif.validate()?;
        self.adm.validate()
    }
}

/// VIF and ADM of one frame pair plus an already computed motion value.
pub fn frame_features(
    tape: &Tape,
    reference: &Var,
    dist: &Var,
    motion: Var,
    cfg: &FeatureConfig,
) -> Result<FeatureVars> {
    Ok(FeatureVars {
        vif: vif_features(tape, reference, dist, &cfg.vif)?,
        adm: adm_score(tape, reference, dist, &cfg.adm)?,
        motion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameReport {
    pub index: usize,
    pub features: FrameFeatures,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamReport {
    pub frames: Vec<FrameReport>,
    /// Mean frame score before any clipping.
    pub pooled: f64,
    /// Final stream score (clipped when the model asks for it).
    pub score: f64,
}

impl StreamReport {
    fn from_frames(frames: Vec<FrameReport>, model: &VmafModel) -> Result<Self> {
        if frames.is_empty() {
            return Err(invalid("no frames were scored"));
        }
        let pooled = frames.iter().map(|f| f.score).sum::<f64>() / frames.len() as f64;
        let score = if model.clip_enabled {
            pooled.clamp(0.0, 100.0)
        } else {
            pooled
        };
        Ok(Self {
            frames,
            pooled,
            score,
        })
    }

    /// One row per frame: `frame_index,vif0,vif1,vif2,vif3,adm,motion,score`.
    pub fn write_features_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "frame_index,vif0,vif1,vif2,vif3,adm,motion,score")?;
        for f in &self.frames {
            let [v0, v1, v2, v3, adm, mo] = f.features.to_array();
            writeln!(
                out,
                "{},{v0},{v1},{v2},{v3},{adm},{mo},{}",
                f.index, f.score
            )?;
        }
        Ok(())
    }
}

fn check_streams(ref_shapes: &[(usize, usize)], dist_shapes: &[(usize, usize)]) -> Result<()> {
    if ref_shapes.len() != dist_shapes.len() {
        return Err(invalid(format!(
            "reference has {} frames but distorted has {}",
            ref_shapes.len(),
            dist_shapes.len()
        )));
    }
    if ref_shapes.is_empty() {
        return Err(invalid("streams must contain at least one frame"));
    }
    let first = ref_shapes[0];
    if let Some(s) = ref_shapes.iter().chain(dist_shapes).find(|&&s| s != first) {
        return Err(invalid(format!(
            "frame dimensions differ: {first:?} vs {s:?}"
        )));
    }
    Ok(())
}

/// Stream score as a tape expression, with a per-frame report.
pub fn score_stream(
    tape: &Tape,
    refs: &[Var],
    dists: &[Var],
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<(Var, StreamReport)> {
    let shapes = |v: &[Var]| v.iter().map(Var::shape).collect::<Vec<_>>();
    check_streams(&shapes(refs), &shapes(dists))?;
    let cfg = cfg.for_model(model);
    let mut scores = Vec::with_capacity(refs.len());
    let mut frames = Vec::with_capacity(refs.len());
    for (i, (r, d)) in refs.iter().zip(dists).enumerate() {
        let m = motion(tape, refs, i, &cfg.motion)?;
        let feats = frame_features(tape, r, d, m, &cfg)?;
        let s = model.predict_frame(tape, &feats)?;
        frames.push(FrameReport {
            index: i,
            features: feats.values(),
            score: s.item(),
        });
        scores.push(s);
    }
    let pooled = model.pool(tape, &scores)?;
    let report = StreamReport::from_frames(frames, model)?;
    Ok((pooled, report))
}

fn score_one(
    r: &Plane,
    d: &Plane,
    motion: f64,
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<(FrameFeatures, f64)> {
    let tape = Tape::new();
    let m = tape.scalar(motion);
    let feats = frame_features(
        &tape,
        &tape.constant(r.clone()),
        &tape.constant(d.clone()),
        m,
        cfg,
    )?;
    let s = model.predict_frame(&tape, &feats)?;
    Ok((feats.values(), s.item()))
}

/// Scores in-memory frames without recording gradients, in parallel.
pub fn score_frames(
    refs: &[Plane],
    dists: &[Plane],
    model: &VmafModel,
    cfg: &FeatureConfig,
) -> Result<StreamReport> {
    let shapes = |v: &[Plane]| v.iter().map(Plane::shape).collect::<Vec<_>>();
    check_streams(&shapes(refs), &shapes(dists))?;
    let cfg = cfg.for_model(model);
    let motions = motion_sequence(refs, &cfg.motion)?;
    let frames = refs
        .par_iter()
        .zip(dists)
        .zip(&motions)
        .enumerate()
        .map(|(index, ((r, d), &m))| {
            let (features, score) = score_one(r, d, m, model, &cfg)?;
            Ok(FrameReport {
                index,
                features,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    StreamReport::from_frames(frames, model)
}

/// Frame-at-a-time scorer that keeps only one frame of look-behind.
pub struct StreamScorer {
    model: VmafModel,
    cfg: FeatureConfig,
    motion: MotionState,
    pending: Option<(Plane, Plane)>,
    frames: Vec<FrameReport>,
}

impl StreamScorer {
    pub fn new(model: VmafModel, cfg: &FeatureConfig) -> Result<Self> {
        let cfg = cfg.for_model(&model);
        cfg.validate()?;
        Ok(Self {
            motion: MotionState::new(cfg.motion.clone()),
            model,
            cfg,
            pending: None,
            frames: Vec::new(),
        })
    }

    fn emit(&mut self, motion: f64) -> Result<()> {
        let (r, d) = self.pending.take().expect("a frame is pending");
        let (features, score) = score_one(&r, &d, motion, &self.model, &self.cfg)?;
        self.frames.push(FrameReport {
            index: self.frames.len(),
            features,
            score,
        });
        Ok(())
    }

    pub fn push(&mut self, reference: Plane, dist: Plane) -> Result<()> {
        if reference.shape() != dist.shape() {
            return Err(invalid(format!(
                "frame dimensions differ: {:?} vs {:?}",
                reference.shape(),
                dist.shape()
            )));
        }
        if let Some(m) = self.motion.push(&reference)? {
            self.emit(m)?;
        }
        self.pending = Some((reference, dist));
        Ok(())
    }

    pub fn finish(mut self) -> Result<StreamReport> {
        if let Some(m) = self.motion.finish() {
            self.emit(m)?;
        }
        StreamReport::from_frames(self.frames, &self.model)
    }
}
