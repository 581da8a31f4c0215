use std::io::Write;

use crate::autodiff::Plane;
use crate::error::{invalid, Result};
use crate::fusion::VmafModel;
use crate::vmaf::FeatureConfig;

use super::kernel::KernelFilter;
use super::train::{clips_psnr, clips_score};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    /// Mean pre-clip score.
    pub vmaf: f64,
    /// Mean PSNR; `f64::INFINITY` when the filter is the identity.
    pub psnr_db: f64,
}

/// Scores `I + alpha * (W - I)` for every `alpha` in `alphas`.
///
/// Each clip is scored as its own stream; VMAF and PSNR are averaged over
/// all frames of all clips.
pub fn alpha_sweep(
    filter: &KernelFilter,
    clips: &[Vec<Plane>],
    model: &VmafModel,
    cfg: &FeatureConfig,
    alphas: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(invalid(format!("alpha must be finite, got {a}")));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let f = filter.with_alpha(alpha);
            Ok(SweepRow {
                alpha,
                vmaf: clips_score(clips, &f, model, cfg)?,
                psnr_db: clips_psnr(clips, &f)?,
            })
        })
        .collect()
}

/// `alpha,vmaf,psnr_db`, with an infinite PSNR written as `inf`.
pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "alpha,vmaf,psnr_db")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.alpha, r.vmaf, r.psnr_db)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_lab::unsharp_kernel;
    use crate::synth;

    #[test]
    fn unsharp_sweep_is_monotone() {
        let clips: Vec<Vec<Plane>> = (0..6).map(|i| synth::fixture_pan(i, 128)).collect();
        let model = VmafModel::demo();
        let cfg = FeatureConfig::default();
        let u = unsharp_kernel(7, 1.4, 1.0).unwrap();
        let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
        let rows = alpha_sweep(&u, &clips, &model, &cfg, &alphas).unwrap();
        assert_eq!(rows[0].psnr_db, f64::INFINITY);
        let id = KernelFilter::identity(7).unwrap();
        let self_score: f64 = clips
            .iter()
            .map(|c| crate::filter_lab::validation_score(c, &id, &model, &cfg).unwrap())
            .sum::<f64>()
            / clips.len() as f64;
        assert!((rows[0].vmaf - self_score).abs() < 1e-12);
        for w in rows.windows(2) {
            assert!(w[1].vmaf >= w[0].vmaf, "{rows:?}");
            assert!(w[1].psnr_db < w[0].psnr_db, "{rows:?}");
        }
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), alphas.len() + 1);
        assert!(text.lines().nth(1).unwrap().ends_with(",inf"));
        assert!(alpha_sweep(&u, &clips, &model, &cfg, &[f64::NAN]).is_err());
        assert!(alpha_sweep(&u, &[], &model, &cfg, &[0.5]).is_err());
    }
}
