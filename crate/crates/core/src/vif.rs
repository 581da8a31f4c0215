//! Pixel-domain visual information fidelity over four scales.
//!
//! Local statistics are Gaussian-weighted moments obtained by convolution,
//! so each scale is a composition of tape primitives:
//!
//! ```text
//! g    = cov(ref, dist) / (var(ref) + eps_var)
//! sv^2 = max(var(dist) - g * cov(ref, dist), eps_v)
//! vif  = sum log2(1 + g^2 var(ref) / (sv^2 + sigma_n^2)) / sum log2(1 + var(ref) / sigma_n^2)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Plane, Tape, Var};
use crate::error::{invalid, Result};

/// Normalised 1-D Gaussian window, applied separably.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianWindow {
    pub size: usize,
    pub sigma: f64,
}

impl GaussianWindow {
    /// The reference convention: `sigma = size / 5`.
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            sigma: size as f64 / 5.0,
        }
    }

    pub fn taps(&self) -> Vec<f64> {
        gaussian_taps(self.size, self.sigma)
    }

    /// Full 2-D kernel (outer product of the taps).
    pub fn kernel2d(&self) -> Plane {
        let t = self.taps();
        Plane::from_fn(self.size, self.size, |r, c| t[r] * t[c])
    }

    fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) || self.sigma <= 0.0 {
            return Err(invalid(format!("bad gaussian window {self:?}")));
        }
        Ok(())
    }
}

/// Sampled Gaussian of odd length `size`, normalised to unit sum.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VifConfig {
    /// Variance of the additive noise in the visual-system channel.
    pub sigma_n_sq: f64,
    /// Enhancement gain limit applied to `g` in NEG mode.
    pub egl_vif: f64,
    pub neg_mode: bool,
    pub eps_var: f64,
    pub eps_v: f64,
    pub scale_windows: [GaussianWindow; 4],
}

impl Default for VifConfig {
    fn default() -> Self {
        Self {
            sigma_n_sq: 2.0,
            egl_vif: 1.0,
            neg_mode: false,
            eps_var: 1e-10,
            eps_v: 1e-10,
            scale_windows: [17, 9, 5, 3].map(GaussianWindow::with_size),
        }
    }
}

impl VifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n_sq > 0.0) {
            return Err(invalid("vif sigma_n_sq must be positive"));
        }
        if self.neg_mode && !(self.egl_vif >= 1.0) {
            return Err(invalid("vif egl must be >= 1 in NEG mode"));
        }
        if self.eps_var < 0.0 || self.eps_v < 0.0 {
            return Err(invalid("vif floors must be non-negative"));
        }
        self.scale_windows
            .iter()
            .try_for_each(GaussianWindow::validate)
    }
}

/// Per-pixel statistics of one scale, all on-tape.
pub struct VifScaleStats {
    pub mu_ref: Var,
    pub mu_dist: Var,
    pub sigma_ref_sq: Var,
    pub sigma_dist_sq: Var,
    pub sigma_cross: Var,
    /// Channel gain after flooring at zero and, in NEG mode, capping.
    pub g: Var,
    pub sigma_v_sq: Var,
}

struct SeparableBlur {
    row: Var,
    col: Var,
}

impl SeparableBlur {
    fn new(tape: &Tape, window: &GaussianWindow) -> Result<Self> {
        window.validate()?;
        let taps = window.taps();
        let n = taps.len();
        Ok(Self {
            row: tape.constant(Plane::new(1, n, taps.clone())?),
            col: tape.constant(Plane::new(n, 1, taps)?),
        })
    }

    fn apply(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let h = tape.conv2d(x, &self.row, Padding::Reflect)?;
        tape.conv2d(&h, &self.col, Padding::Reflect)
    }
}

fn check_pair(reference: &Var, dist: &Var, window: &GaussianWindow) -> Result<()> {
    if reference.shape() != dist.shape() {
        return Err(invalid(format!(
            "vif: reference {:?} and distorted {:?} differ in shape",
            reference.shape(),
            dist.shape()
        )));
    }
    let (rows, cols) = reference.shape();
    let radius = window.size / 2;
    if radius >= rows.max(2) || radius >= cols.max(2) {
        return Err(invalid(format!(
            "vif: {rows}x{cols} image is smaller than the {}-tap window",
            window.size
        )));
    }
    Ok(())
}

pub fn vif_scale_stats(
    tape: &Tape,
    reference: &Var,
    dist: &Var,
    window: &GaussianWindow,
    cfg: &VifConfig,
) -> Result<VifScaleStats> {
    check_pair(reference, dist, window)?;
    let blur = SeparableBlur::new(tape, window)?;
    let mu_ref = blur.apply(tape, reference)?;
    let mu_dist = blur.apply(tape, dist)?;
    let ref_sq = blur.apply(tape, &tape.square(reference)?)?;
    let dist_sq = blur.apply(tape, &tape.square(dist)?)?;
    let cross = blur.apply(tape, &tape.mul(reference, dist)?)?;

    // E[X^2] - E[X]^2 can dip below zero by rounding; floor at zero.
    let sigma_ref_sq = tape.relu(&tape.sub(&ref_sq, &tape.square(&mu_ref)?)?)?;
    let sigma_dist_sq = tape.relu(&tape.sub(&dist_sq, &tape.square(&mu_dist)?)?)?;
    let sigma_cross = tape.sub(&cross, &tape.mul(&mu_ref, &mu_dist)?)?;

    let gain = tape.div(&sigma_cross, &tape.add_scalar(&sigma_ref_sq, cfg.eps_var)?)?;
    let sv = tape.sub(&sigma_dist_sq, &tape.mul(&gain, &sigma_cross)?)?;
    let sigma_v_sq = tape.max_scalar(&sv, cfg.eps_v)?;
    // Anti-correlated channels carry no information about the reference.
    let mut g = tape.relu(&gain)?;
    if cfg.neg_mode {
        g = tape.min_scalar(&g, cfg.egl_vif)?;
    }
    Ok(VifScaleStats {
        mu_ref,
        mu_dist,
        sigma_ref_sq,
        sigma_dist_sq,
        sigma_cross,
        g,
        sigma_v_sq,
    })
}

/// Information ratio at one scale. A reference without local variance gives
/// a constant 1.
pub fn vif_scale(
    tape: &Tape,
    reference: &Var,
    dist: &Var,
    window: &GaussianWindow,
    cfg: &VifConfig,
) -> Result<Var> {
    let st = vif_scale_stats(tape, reference, dist, window, cfg)?;
    let num_arg = tape.mul(&tape.square(&st.g)?, &st.sigma_ref_sq)?;
    let num_den = tape.add_scalar(&st.sigma_v_sq, cfg.sigma_n_sq)?;
    let num = tape.sum(&tape.log2_1p_ratio(&num_arg, &num_den)?)?;
    let den = tape.sum(&tape.log2_1p_ratio(&st.sigma_ref_sq, &tape.scalar(cfg.sigma_n_sq))?)?;
    if den.item() == 0.0 {
        return Ok(tape.scalar(1.0));
    }
    tape.div(&num, &den)
}

/// The four VIF features `(scale0, scale1, scale2, scale3)`.
///
/// Scale `s > 0` is computed after blurring the previous scale with the
/// scale-`s` window and keeping every other row and column.
pub fn vif_features(tape: &Tape, reference: &Var, dist: &Var, cfg: &VifConfig) -> Result<[Var; 4]> {
    cfg.validate()?;
    let mut cur_ref = reference.clone();
    let mut cur_dist = dist.clone();
    let mut out = Vec::with_capacity(4);
    for (scale, window) in cfg.scale_windows.iter().enumerate() {
        if scale > 0 {
            check_pair(&cur_ref, &cur_dist, window)?;
            cur_ref = downsample(tape, &cur_ref, window)?;
            cur_dist = downsample(tape, &cur_dist, window)?;
        }
        out.push(vif_scale(tape, &cur_ref, &cur_dist, window, cfg)?);
    }
    Ok(out.try_into().expect("four scales"))
}

/// Blur with the separable window, then decimate by two.
fn downsample(tape: &Tape, x: &Var, window: &GaussianWindow) -> Result<Var> {
    let blurred = SeparableBlur::new(tape, window)?.apply(tape, x)?;
    tape.decimate2(&blurred)
}
