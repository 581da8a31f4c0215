use crate::autodiff::{kernels, Padding, Plane};
use crate::error::{invalid, Result};

use super::KernelFilter;

/// Filters a frame with reflect padding.
pub fn apply_filter(frame: &Plane, filter: &KernelFilter) -> Result<Plane> {
    kernels::conv2d(frame, filter.weights(), Padding::Reflect)
}

/// Filters a luma plane for export, optionally rounding and clamping to 8-bit levels.
pub fn filter_luma(frame: &Plane, filter: &KernelFilter, clamp_round: bool) -> Result<Plane> {
    let out = apply_filter(frame, filter)?;
    Ok(if clamp_round { quantize8(&out) } else { out })
}

/// Rounds to the nearest 8-bit level and clamps to `[0, 255]`.
pub fn quantize8(frame: &Plane) -> Plane {
    frame.map(|v| v.round().clamp(0.0, 255.0))
}

/// PSNR in dB for 8-bit content. Identical frames give `f64::INFINITY`.
pub fn psnr(reference: &Plane, distorted: &Plane) -> Result<f64> {
    if reference.shape() != distorted.shape() {
        return Err(invalid(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            reference.shape(),
            distorted.shape()
        )));
    }
    let n = reference.as_slice().len() as f64;
    let mse = reference
        .as_slice()
        .iter()
        .zip(distorted.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Mean PSNR of `I + alpha * W_hat` over `frames`, without quantisation.
///
/// The filtered-minus-reference difference is linear in `alpha`, so the
/// PSNR is `C - 20 log10(alpha)`. Returns `C` (the PSNR at `alpha = 1`).
fn unit_alpha_mse(frames: &[Plane], filter: &KernelFilter) -> Result<Vec<f64>> {
    let residual = KernelFilter::from_weights(filter.residual())?;
    frames
        .iter()
        .map(|f| {
            let d = apply_filter(f, &residual)?;
            Ok(d.as_slice().iter().map(|v| v * v).sum::<f64>() / d.as_slice().len() as f64)
        })
        .collect()
}

/// Amplification at which `I + alpha * W_hat` reaches `target_db` mean PSNR
/// on `frames` (unquantised).
pub fn alpha_for_psnr(frames: &[Plane], filter: &KernelFilter, target_db: f64) -> Result<f64> {
    if frames.is_empty() {
        return Err(invalid("alpha_for_psnr needs at least one frame"));
    }
    if !target_db.is_finite() {
        return Err(invalid(format!(
            "target PSNR must be finite, got {target_db}"
        )));
    }
    let mses = unit_alpha_mse(frames, filter)?;
    if mses.contains(&0.0) {
        return Err(invalid(
            "filter residual leaves a frame unchanged; PSNR cannot be matched",
        ));
    }
    let c = mses
        .iter()
        .map(|m| 10.0 * (255.0f64 * 255.0 / m).log10())
        .sum::<f64>()
        / mses.len() as f64;
    Ok(10f64.powf((c - target_db) / 20.0))
}

/// Mean unquantised PSNR of `filter` over `frames`.
pub fn mean_psnr(frames: &[Plane], filter: &KernelFilter) -> Result<f64> {
    if frames.is_empty() {
        return Err(invalid("mean_psnr needs at least one frame"));
    }
    let mut total = 0.0;
    for f in frames {
        total += psnr(f, &apply_filter(f, filter)?)?;
    }
    Ok(total / frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_lab::unsharp_kernel;
    use crate::synth::natural_frame;

    #[test]
    fn psnr_examples() {
        let a = Plane::filled(4, 4, 100.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Plane::filled(4, 4, 101.0);
        assert!((psnr(&a, &b).unwrap() - 48.130803608679).abs() < 1e-9);
        assert!(psnr(&a, &Plane::zeros(3, 4)).is_err());
        let full = psnr(&Plane::zeros(2, 2), &Plane::filled(2, 2, 255.0)).unwrap();
        assert!(full.abs() < 1e-12);
        let five = psnr(&a, &Plane::filled(4, 4, 105.0)).unwrap();
        assert!((five - 10.0 * (255.0f64 * 255.0 / 25.0).log10()).abs() < 1e-12);
        assert!((five - 34.15).abs() < 5e-3);
    }

    #[test]
    fn export_filtering() {
        let f = natural_frame(32, 32, 5).map(f64::round);
        let id = KernelFilter::identity(7).unwrap();
        assert_eq!(filter_luma(&f, &id, true).unwrap(), f);
        let flat = Plane::filled(16, 16, 77.0);
        let u = unsharp_kernel(7, 1.4, 1.0).unwrap();
        let out = filter_luma(&flat, &u, false).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-12);

        let step = Plane::from_fn(16, 16, |_, c| if c < 8 { 50.0 } else { 200.0 });
        let sharp = filter_luma(&step, &u, false).unwrap();
        let row: Vec<f64> = (0..16).map(|c| sharp.get(8, c)).collect();
        assert!(row[8] > 200.0 && row[7] < 50.0, "{row:?}");
        assert!(sharp.as_slice().iter().cloned().fold(f64::MIN, f64::max) > 200.0);
        let strong = unsharp_kernel(7, 1.4, 20.0).unwrap();
        let clamped = filter_luma(&step, &strong, true).unwrap();
        assert!(clamped
            .as_slice()
            .iter()
            .all(|v| (0.0..=255.0).contains(v) && v.fract() == 0.0));
    }

    #[test]
    fn matched_alpha_hits_target() {
        let frames = vec![natural_frame(48, 48, 1), natural_frame(48, 48, 2)];
        let u = unsharp_kernel(7, 1.4, 1.0).unwrap();
        let alpha = alpha_for_psnr(&frames, &u, 40.0).unwrap();
        let got = mean_psnr(&frames, &u.with_alpha(alpha)).unwrap();
        assert!((got - 40.0).abs() < 1e-9, "{got}");
        assert!(alpha_for_psnr(&frames, &KernelFilter::identity(3).unwrap(), 40.0).is_err());
    }
}
