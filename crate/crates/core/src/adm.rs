//! Detail loss measure in the Daubechies-2 wavelet domain.
//!
//! The distorted detail coefficients `T` are split into a restored part `R`
//! (what a pure attenuation of the reference `O` would give) and an additive
//! impairment `A = T - R`. After contrast sensitivity weighting and masking
//! by the local impairment energy, the score is the ratio of cube norms of
//! the restored and reference details over the central part of each subband.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Boundary, FilterDecimate, Padding, Plane, RectRegion, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Daubechies-2 analysis low-pass filter.
pub const DB2_LO: [f64; 4] = [
    0.482962913144690,
    0.836516303737469,
    0.224143868041857,
    -0.129409522550921,
];
/// Daubechies-2 analysis high-pass filter.
pub const DB2_HI: [f64; 4] = [
    -0.129409522550921,
    -0.224143868041857,
    0.836516303737469,
    -0.482962913144690,
];

/// Basis function amplitudes of the 9/7 wavelet per level (rows) and
/// orientation (approx, horizontal/vertical, diagonal, horizontal/vertical).
const BASIS_AMPLITUDES: [[f64; 4]; 4] = [
    [0.62171, 0.67234, 0.72709, 0.67234],
    [0.34537, 0.41317, 0.49428, 0.41317],
    [0.18004, 0.22727, 0.28688, 0.22727],
    [0.091401, 0.11792, 0.15214, 0.11792],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubbandWeights {
    pub vertical: f64,
    pub diagonal: f64,
    pub horizontal: f64,
}

impl SubbandWeights {
    fn as_array(&self) -> [f64; 3] {
        [self.vertical, self.diagonal, self.horizontal]
    }
}

/// Contrast sensitivity weights (inverse quantisation steps of the
/// Watson luma model) for `levels` levels.
///
/// `view_distance` is in units of display height.
pub fn reference_csf_weights(
    levels: usize,
    view_distance: f64,
    display_height: f64,
) -> Vec<SubbandWeights> {
    const A: f64 = 0.495;
    const K: f64 = 0.466;
    const F0: f64 = 0.401;
    const G: [f64; 4] = [1.501, 1.0, 0.534, 1.0];
    let r = view_distance * display_height * PI / 180.0;
    let weight = |level: usize, theta: usize| {
        let temp = (2f64.powi(level as i32 + 1) * F0 * G[theta] / r).log10();
        let q = 2.0 * A * 10f64.powf(K * temp * temp) / BASIS_AMPLITUDES[level.min(3)][theta];
        1.0 / q
    };
    (0..levels)
        .map(|l| SubbandWeights {
            vertical: weight(l, 1),
            diagonal: weight(l, 2),
            horizontal: weight(l, 1),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmConfig {
    /// Enhancement gain limit on restored coefficients in NEG mode.
    pub egl_dlm: f64,
    pub neg_mode: bool,
    /// Fraction of each subband side dropped at every edge before pooling.
    pub border_exclusion_fraction: f64,
    pub csf_weights: Vec<SubbandWeights>,
    /// Neighbourhood weights for the masking threshold (odd-sided, rows).
    pub cm_kernel: Vec<Vec<f64>>,
    pub cm_threshold_factor: f64,
    /// Orientation tolerance in degrees under which `R = T`.
    pub angle_tolerance_deg: f64,
    /// Guard on `T / O`.
    pub ratio_eps: f64,
    /// Denominators at or below this mean the reference has no usable detail.
    pub min_denominator: f64,
    pub boundary: Boundary,
}

impl Default for AdmConfig {
    fn default() -> Self {
        let e = 1.0 / 30.0;
        Self {
            egl_dlm: 1.0,
            neg_mode: false,
            border_exclusion_fraction: 0.1,
            csf_weights: reference_csf_weights(4, 3.0, 1080.0),
            cm_kernel: vec![vec![e, e, e], vec![e, 2.0 * e, e], vec![e, e, e]],
            cm_threshold_factor: 1.0,
            angle_tolerance_deg: 1.0,
            ratio_eps: 1e-15,
            min_denominator: 1e-6,
            boundary: Boundary::Reflect,
        }
    }
}

impl AdmConfig {
    pub fn levels(&self) -> usize {
        self.csf_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.border_exclusion_fraction) {
            return Err(invalid(format!(
                "border_exclusion_fraction must be in [0, 0.5), got {}",
                self.border_exclusion_fraction
            )));
        }
        if self.csf_weights.is_empty() {
            return Err(invalid("ADM needs at least one wavelet level"));
        }
        if self
            .csf_weights
            .iter()
            .flat_map(|w| w.as_array())
            .any(|w| !(w > 0.0) || !w.is_finite())
        {
            return Err(invalid("CSF weights must be positive and finite"));
        }
        self.cm_plane()?;
        if !self.egl_dlm.is_finite() || self.egl_dlm <= 0.0 {
            return Err(invalid(format!(
                "egl_dlm must be positive, got {}",
                self.egl_dlm
            )));
        }
        if !(self.angle_tolerance_deg >= 0.0)
            || !(self.ratio_eps > 0.0)
            || !self.cm_threshold_factor.is_finite()
        {
            return Err(invalid(
                "bad ADM angle tolerance, ratio eps or threshold factor",
            ));
        }
        Ok(())
    }

    pub fn cm_plane(&self) -> Result<Plane> {
        let rows = self.cm_kernel.len();
        let cols = self.cm_kernel.first().map_or(0, Vec::len);
        if rows.is_multiple_of(2)
            || cols.is_multiple_of(2)
            || self.cm_kernel.iter().any(|r| r.len() != cols)
        {
            return Err(invalid(
                "cm_kernel must be a rectangular array with odd sides",
            ));
        }
        Plane::new(rows, cols, self.cm_kernel.concat())
    }
}

/// One analysis level: approximation plus the three detail orientations.
#[derive(Debug, Clone)]
pub struct WaveletLevel {
    pub approx: Var,
    pub vertical: Var,
    pub diagonal: Var,
    pub horizontal: Var,
}

impl WaveletLevel {
    pub fn details(&self) -> [&Var; 3] {
        [&self.vertical, &self.diagonal, &self.horizontal]
    }
}

#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub levels: Vec<WaveletLevel>,
}

fn stage(taps: &[f64; 4], axis: Axis, boundary: Boundary) -> FilterDecimate {
    FilterDecimate {
        taps: taps.to_vec(),
        offset: -1,
        axis,
        boundary,
    }
}

/// One separable analysis step: filter columns, then rows.
pub fn dwt2d_level(tape: &Tape, image: &Var, boundary: Boundary) -> Result<WaveletLevel> {
    let (rows, cols) = image.shape();
    if rows < 2 || cols < 2 {
        return Err(invalid(format!(
            "wavelet analysis needs at least 2x2, got {rows}x{cols}"
        )));
    }
    let lo_v = tape.filter_decimate(image, &stage(&DB2_LO, Axis::Rows, boundary))?;
    let hi_v = tape.filter_decimate(image, &stage(&DB2_HI, Axis::Rows, boundary))?;
    let lo_h = stage(&DB2_LO, Axis::Cols, boundary);
    let hi_h = stage(&DB2_HI, Axis::Cols, boundary);
    Ok(WaveletLevel {
        approx: tape.filter_decimate(&lo_v, &lo_h)?,
        vertical: tape.filter_decimate(&lo_v, &hi_h)?,
        horizontal: tape.filter_decimate(&hi_v, &lo_h)?,
        diagonal: tape.filter_decimate(&hi_v, &hi_h)?,
    })
}

/// `levels`-deep analysis with reflect boundaries.
pub fn dwt2d(tape: &Tape, image: &Var, levels: usize) -> Result<WaveletPyramid> {
    dwt2d_with_boundary(tape, image, levels, Boundary::Reflect)
}

pub fn dwt2d_with_boundary(
    tape: &Tape,
    image: &Var,
    levels: usize,
    boundary: Boundary,
) -> Result<WaveletPyramid> {
    let (rows, cols) = image.shape();
    let need = 1usize << levels.min(30);
    if levels == 0 || rows < need || cols < need {
        return Err(invalid(format!(
            "{levels}-level wavelet analysis needs at least {need}x{need}, got {rows}x{cols}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = image.clone();
    for _ in 0..levels {
        let level = dwt2d_level(tape, &current, boundary)?;
        current = level.approx.clone();
        out.push(level);
    }
    Ok(WaveletPyramid { levels: out })
}

/// Restored / additive split of a distorted pyramid.
#[derive(Debug, Clone)]
pub struct AdmDecomposition {
    pub restored: WaveletPyramid,
    pub additive: WaveletPyramid,
    /// Orientation `atan2(vertical, horizontal)` in degrees per level.
    pub psi_ref: Vec<Plane>,
    pub psi_dist: Vec<Plane>,
    /// Coefficients whose orientation matched within the tolerance.
    pub aligned: Vec<Rc<Vec<bool>>>,
}

fn orientation(level: &WaveletLevel) -> Plane {
    level
        .vertical
        .value()
        .zip_map(level.horizontal.value(), |v, h| v.atan2(h).to_degrees())
}

fn aligned_mask(
    o: &WaveletLevel,
    t: &WaveletLevel,
    psi_o: &Plane,
    psi_t: &Plane,
    tol: f64,
) -> Vec<bool> {
    let (ov, oh) = (
        o.vertical.value().as_slice(),
        o.horizontal.value().as_slice(),
    );
    let (tv, th) = (
        t.vertical.value().as_slice(),
        t.horizontal.value().as_slice(),
    );
    psi_o
        .as_slice()
        .iter()
        .zip(psi_t.as_slice())
        .enumerate()
        .map(|(i, (a, b))| {
            let o_zero = ov[i] == 0.0 && oh[i] == 0.0;
            let t_zero = tv[i] == 0.0 && th[i] == 0.0;
            let d = (a - b).rem_euclid(360.0);
            (o_zero && t_zero) || (!o_zero && !t_zero && d.min(360.0 - d) <= tol)
        })
        .collect()
}

fn restore_band(
    tape: &Tape,
    o: &Var,
    t: &Var,
    aligned: &Rc<Vec<bool>>,
    cfg: &AdmConfig,
) -> Result<Var> {
    let ratio = tape.clip(&tape.div_stable(t, o, cfg.ratio_eps)?, 0.0, 1.0)?;
    let clipped = tape.mul(&ratio, o)?;
    if !cfg.neg_mode {
        return tape.select(aligned.clone(), t, &clipped);
    }
    let gained = tape.scale(&clipped, cfg.egl_dlm)?;
    let values = clipped.value().as_slice();
    let pos = Rc::new(values.iter().map(|&v| v > 0.0).collect::<Vec<_>>());
    let neg = Rc::new(values.iter().map(|&v| v < 0.0).collect::<Vec<_>>());
    let limited = tape.select(neg, &tape.max(&gained, t)?, &clipped)?;
    let limited = tape.select(pos, &tape.min(&gained, t)?, &limited)?;
    tape.select(aligned.clone(), &limited, &clipped)
}

fn check_same_layout(a: &WaveletPyramid, b: &WaveletPyramid) -> Result<()> {
    let shapes = |p: &WaveletPyramid| {
        p.levels
            .iter()
            .map(|l| l.vertical.shape())
            .collect::<Vec<_>>()
    };
    if shapes(a) != shapes(b) {
        return Err(invalid(
            "decouple: pyramids come from differently shaped images",
        ));
    }
    Ok(())
}

pub fn decouple(
    tape: &Tape,
    reference: &WaveletPyramid,
    dist: &WaveletPyramid,
    cfg: &AdmConfig,
) -> Result<AdmDecomposition> {
    check_same_layout(reference, dist)?;
    let mut restored = Vec::new();
    let mut additive = Vec::new();
    let (mut psi_ref, mut psi_dist, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for (o, t) in reference.levels.iter().zip(&dist.levels) {
        let po = orientation(o);
        let pt = orientation(t);
        let mask = Rc::new(aligned_mask(o, t, &po, &pt, cfg.angle_tolerance_deg));
        let band = |ob: &Var, tb: &Var| restore_band(tape, ob, tb, &mask, cfg);
        let r = WaveletLevel {
            approx: t.approx.clone(),
            vertical: band(&o.vertical, &t.vertical)?,
            diagonal: band(&o.diagonal, &t.diagonal)?,
            horizontal: band(&o.horizontal, &t.horizontal)?,
        };
        let a = WaveletLevel {
            approx: tape.sub(&t.approx, &r.approx)?,
            vertical: tape.sub(&t.vertical, &r.vertical)?,
            diagonal: tape.sub(&t.diagonal, &r.diagonal)?,
            horizontal: tape.sub(&t.horizontal, &r.horizontal)?,
        };
        restored.push(r);
        additive.push(a);
        psi_ref.push(po);
        psi_dist.push(pt);
        masks.push(mask);
    }
    Ok(AdmDecomposition {
        restored: WaveletPyramid { levels: restored },
        additive: WaveletPyramid { levels: additive },
        psi_ref,
        psi_dist,
        aligned: masks,
    })
}

/// Central pooling region of a `rows x cols` subband.
pub fn central_region(shape: (usize, usize), fraction: f64) -> RectRegion {
    let margin = |n: usize| {
        ((n as f64 * fraction - 0.5).floor().max(0.0) as usize).min(n.saturating_sub(1) / 2)
    };
    let (top, left) = (margin(shape.0), margin(shape.1));
    RectRegion {
        top,
        left,
        rows: shape.0 - 2 * top,
        cols: shape.1 - 2 * left,
    }
}

/// Smallest image side accepted by [`adm_score`] for `cfg`.
pub fn min_image_side(cfg: &AdmConfig) -> usize {
    let radius = cfg.cm_kernel.len() / 2;
    (radius + 1).max(2) << cfg.levels()
}

/// Numerator and denominator of the score, before the final division.
#[derive(Debug, Clone)]
pub struct AdmTerms {
    pub numerator: Var,
    pub denominator: Var,
}

pub fn adm_terms(tape: &Tape, reference: &Var, dist: &Var, cfg: &AdmConfig) -> Result<AdmTerms> {
    cfg.validate()?;
    if reference.shape() != dist.shape() {
        return Err(invalid(format!(
            "ADM shape mismatch: {:?} vs {:?}",
            reference.shape(),
            dist.shape()
        )));
    }
    let (rows, cols) = reference.shape();
    let need = min_image_side(cfg);
    if rows < need || cols < need {
        return Err(invalid(format!(
            "ADM needs at least {need}x{need}, got {rows}x{cols}"
        )));
    }
    let levels = cfg.levels();
    let o = dwt2d_with_boundary(tape, reference, levels, cfg.boundary)?;
    let t = dwt2d_with_boundary(tape, dist, levels, cfg.boundary)?;
    let dec = decouple(tape, &o, &t, cfg)?;
    let cm = tape.constant(cfg.cm_plane()?);

    let mut num_terms = Vec::new();
    let mut den_terms = Vec::new();
    for (l, weights) in cfg.csf_weights.iter().enumerate() {
        let w = weights.as_array();
        let r_bands = dec.restored.levels[l].details();
        let a_bands = dec.additive.levels[l].details();
        let o_bands = o.levels[l].details();

        let mut masked = None;
        for (a, &wt) in a_bands.iter().zip(&w) {
            let e = tape.abs(&tape.scale(a, wt)?)?;
            masked = Some(match masked {
                None => e,
                Some(acc) => tape.add(&acc, &e)?,
            });
        }
        let masked = masked.expect("three detail bands");
        let thr = tape.scale(
            &tape.conv2d(&masked, &cm, Padding::Reflect)?,
            cfg.cm_threshold_factor,
        )?;
        let region = central_region(masked.shape(), cfg.border_exclusion_fraction);

        for ((r, ob), &wt) in r_bands.iter().zip(o_bands).zip(&w) {
            let cm_r = tape.relu(&tape.sub(&tape.abs(&tape.scale(r, wt)?)?, &thr)?)?;
            num_terms.push(tape.cbrt(&tape.sum_region(&tape.cube(&cm_r)?, region)?)?);
            let csf_o = tape.abs(&tape.scale(ob, wt)?)?;
            den_terms.push(tape.cbrt(&tape.sum_region(&tape.cube(&csf_o)?, region)?)?);
        }
    }
    let total = |terms: Vec<Var>| -> Result<Var> { tape.sum(&tape.concat(&terms)?) };
    Ok(AdmTerms {
        numerator: total(num_terms)?,
        denominator: total(den_terms)?,
    })
}

/// Detail-loss score, 1 for identical inputs.
pub fn adm_score(tape: &Tape, reference: &Var, dist: &Var, cfg: &AdmConfig) -> Result<Var> {
    let terms = adm_terms(tape, reference, dist, cfg)?;
    let den = terms.denominator.item();
    if !(den > cfg.min_denominator) {
        return Err(Error::NumericDomain(format!(
            "ADM denominator {den:e} is degenerate: the reference has no detail in the pooled region"
        )));
    }
    tape.div(&terms.numerator, &terms.denominator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels::reflect_index;
    use crate::synth;
    use proptest::prelude::*;

    // Plain-loop transform used as an oracle.
    fn oracle_level(x: &Plane, periodic: bool) -> [Plane; 4] {
        let (rows, cols) = x.shape();
        let idx = |i: isize, n: usize| {
            if periodic {
                i.rem_euclid(n as isize) as usize
            } else {
                reflect_index(i, n)
            }
        };
        let (or, oc) = (rows.div_ceil(2), cols.div_ceil(2));
        let mut out = [(); 4].map(|_| Plane::zeros(or, oc));
        let filters = [
            (&DB2_LO, &DB2_LO),
            (&DB2_LO, &DB2_HI),
            (&DB2_HI, &DB2_HI),
            (&DB2_HI, &DB2_LO),
        ];
        for (band, (fv, fh)) in filters.iter().enumerate() {
            for i in 0..or {
                for j in 0..oc {
                    let mut s = 0.0;
                    for a in 0..4 {
                        for b in 0..4 {
                            let r = idx(2 * i as isize - 1 + a as isize, rows);
                            let c = idx(2 * j as isize - 1 + b as isize, cols);
                            s += fv[a] * fh[b] * x.get(r, c);
                        }
                    }
                    out[band].set(i, j, s);
                }
            }
        }
        out
    }

    fn level_planes(l: &WaveletLevel) -> [Plane; 4] {
        [
            l.approx.value().clone(),
            l.vertical.value().clone(),
            l.diagonal.value().clone(),
            l.horizontal.value().clone(),
        ]
    }

    #[test]
    fn constant_image_levels() {
        let t = Tape::new();
        let pyr = dwt2d(&t, &t.constant(Plane::filled(32, 48, 10.0)), 4).unwrap();
        for (l, level) in pyr.levels.iter().enumerate() {
            let want = 10.0 * 2f64.powi(l as i32 + 1);
            assert!(level
                .approx
                .value()
                .as_slice()
                .iter()
                .all(|v| (v - want).abs() < 1e-9 * want));
            for d in level.details() {
                assert!(d.value().max_abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_loop_oracle_and_step_edge() {
        let step = Plane::from_fn(8, 8, |_, c| if c < 4 { 0.0 } else { 100.0 });
        let noisy = synth::natural_frame(13, 10, 4);
        for img in [step.clone(), noisy] {
            let t = Tape::new();
            let got = level_planes(
                &dwt2d_level(&t, &t.constant(img.clone()), Boundary::Reflect).unwrap(),
            );
            let want = oracle_level(&img, false);
            for (g, w) in got.iter().zip(&want) {
                assert!(g.max_abs_diff(w) < 1e-10);
            }
        }
        let t = Tape::new();
        let level = dwt2d_level(&t, &t.constant(step), Boundary::Reflect).unwrap();
        let energy = |v: &Var| v.value().as_slice().iter().map(|x| x * x).sum::<f64>();
        let ev = energy(&level.vertical);
        assert!(ev > 1000.0);
        assert!(energy(&level.horizontal) < 1e-9 * ev && energy(&level.diagonal) < 1e-9 * ev);
    }

    #[test]
    fn size_errors() {
        let t = Tape::new();
        assert!(dwt2d(&t, &t.constant(Plane::zeros(15, 64)), 4).is_err());
        assert!(dwt2d(&t, &t.constant(Plane::zeros(16, 16)), 4).is_ok());
        let small = t.constant(synth::natural_frame(24, 64, 1));
        assert!(adm_score(&t, &small, &small, &AdmConfig::default()).is_err());
        let a = t.constant(synth::natural_frame(64, 64, 1));
        let b = t.constant(synth::natural_frame(64, 66, 1));
        assert!(adm_score(&t, &a, &b, &AdmConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn parseval_one_level(seed in any::<u64>(), hr in 1usize..12, hc in 1usize..12) {
            let img = synth::add_noise(&synth::natural_frame(2 * hr + 2, 2 * hc + 2, seed), 20.0, seed);
            let t = Tape::new();
            let level = dwt2d_level(&t, &t.constant(img.clone()), Boundary::Periodic).unwrap();
            let sq = |p: &Plane| p.as_slice().iter().map(|v| v * v).sum::<f64>();
            let coeff: f64 = level_planes(&level).iter().map(sq).sum();
            prop_assert!((coeff - sq(&img)).abs() <= 1e-8 * sq(&img));
            let want = oracle_level(&img, true);
            for (g, w) in level_planes(&level).iter().zip(&want) {
                prop_assert!(g.max_abs_diff(w) < 1e-9);
            }
        }

        #[test]
        fn decouple_reconstructs_exactly(seed in any::<u64>(), neg in any::<bool>(), egl in 0.5f64..2.0) {
            let r = synth::natural_frame(32, 32, seed);
            let d = synth::add_noise(&synth::unsharp(&r, 1.5), 6.0, seed ^ 1);
            let cfg = AdmConfig { neg_mode: neg, egl_dlm: egl, ..Default::default() };
            let t = Tape::new();
            let o = dwt2d(&t, &t.constant(r), 4).unwrap();
            let tp = dwt2d(&t, &t.constant(d), 4).unwrap();
            let dec = decouple(&t, &o, &tp, &cfg).unwrap();
            for l in 0..4 {
                let rl = level_planes(&dec.restored.levels[l]);
                let al = level_planes(&dec.additive.levels[l]);
                let tl = level_planes(&tp.levels[l]);
                for b in 0..4 {
                    let sum = rl[b].zip_map(&al[b], |x, y| x + y);
                    prop_assert!(sum.max_abs_diff(&tl[b]) <= 1e-13 * tl[b].max_abs().max(1.0));
                }
            }
        }

        #[test]
        fn decouple_is_idempotent(seed in any::<u64>()) {
            let r = synth::natural_frame(32, 32, seed);
            let d = synth::add_noise(&synth::blur(&r, 5, 1.0), 4.0, seed ^ 7);
            let cfg = AdmConfig::default();
            let t = Tape::new();
            let o = dwt2d(&t, &t.constant(r), 4).unwrap();
            let tp = dwt2d(&t, &t.constant(d), 4).unwrap();
            let first = decouple(&t, &o, &tp, &cfg).unwrap();
            let second = decouple(&t, &o, &first.restored, &cfg).unwrap();
            for l in 0..4 {
                let stable: Vec<bool> = first.aligned[l].iter().zip(second.aligned[l].iter()).map(|(a, b)| a == b).collect();
                for b in 1..4 {
                    let p = &level_planes(&first.restored.levels[l])[b];
                    let q = &level_planes(&second.restored.levels[l])[b];
                    for (i, ok) in stable.iter().enumerate() {
                        if *ok {
                            let (x, y) = (p.as_slice()[i], q.as_slice()[i]);
                            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{} vs {}", x, y);
                        }
                    }
                }
            }
        }
    }

    fn single_level(t: &Tape, v: [[f64; 2]; 3]) -> WaveletPyramid {
        let p = |x: f64, y: f64| t.constant(Plane::from_rows(&[vec![x, y]]).unwrap());
        WaveletPyramid {
            levels: vec![WaveletLevel {
                approx: p(0.0, 0.0),
                vertical: p(v[0][0], v[0][1]),
                diagonal: p(v[1][0], v[1][1]),
                horizontal: p(v[2][0], v[2][1]),
            }],
        }
    }

    #[test]
    fn decouple_examples() {
        let t = Tape::new();
        let o = single_level(&t, [[3.0, 0.0], [-2.0, 5.0], [4.0, 0.0]]);
        let doubled = single_level(&t, [[6.0, 7.0], [-4.0, 1.0], [8.0, 0.0]]);
        let base = decouple(&t, &o, &doubled, &AdmConfig::default()).unwrap();
        let lv = &base.restored.levels[0];
        // column 0 aligned: enhancement passes through
        assert_eq!(lv.vertical.value().get(0, 0), 6.0);
        assert_eq!(lv.diagonal.value().get(0, 0), -4.0);
        // column 1: O has zero (v, h) so nothing is aligned; O == 0 forces R = 0
        assert_eq!(lv.vertical.value().get(0, 1), 0.0);
        assert_eq!(base.additive.levels[0].vertical.value().get(0, 1), 7.0);
        assert!((lv.diagonal.value().get(0, 1) - 1.0).abs() < 1e-14);

        let neg = decouple(
            &t,
            &o,
            &doubled,
            &AdmConfig {
                neg_mode: true,
                ..Default::default()
            },
        )
        .unwrap();
        let lv = &neg.restored.levels[0];
        assert_eq!(lv.vertical.value().get(0, 0), 3.0);
        assert_eq!(lv.diagonal.value().get(0, 0), -2.0);
        assert_eq!(lv.horizontal.value().get(0, 0), 4.0);

        let same = decouple(&t, &o, &o, &AdmConfig::default()).unwrap();
        for b in same.additive.levels[0].details() {
            assert_eq!(b.value().max_abs(), 0.0);
        }
        let mut neg_gain = AdmConfig {
            neg_mode: true,
            egl_dlm: 1.5,
            ..Default::default()
        };
        let lv = decouple(&t, &o, &doubled, &neg_gain)
            .unwrap()
            .restored
            .levels[0]
            .clone();
        assert_eq!(lv.vertical.value().get(0, 0), 4.5);
        neg_gain.egl_dlm = 3.0;
        let lv = decouple(&t, &o, &doubled, &neg_gain)
            .unwrap()
            .restored
            .levels[0]
            .clone();
        assert_eq!(lv.vertical.value().get(0, 0), 6.0);
    }

    // Plain-loop implementation of the full score.
    fn adm_oracle(r: &Plane, d: &Plane, cfg: &AdmConfig) -> f64 {
        let (mut o, mut t) = (r.clone(), d.clone());
        let cm = cfg.cm_plane().unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for w in &cfg.csf_weights {
            let ob = oracle_level(&o, false);
            let tb = oracle_level(&t, false);
            let (rows, cols) = ob[1].shape();
            let n = rows * cols;
            let mut rest = vec![vec![0.0; n]; 4];
            let mut add = vec![vec![0.0; n]; 4];
            for i in 0..n {
                let (ov, oh) = (ob[1].as_slice()[i], ob[3].as_slice()[i]);
                let (tv, th) = (tb[1].as_slice()[i], tb[3].as_slice()[i]);
                let dot = ov * tv + oh * th;
                let mo = (ov * ov + oh * oh).sqrt();
                let mt = (tv * tv + th * th).sqrt();
                let aligned = (mo == 0.0 && mt == 0.0)
                    || mo > 0.0
                        && mt > 0.0
                        && dot / (mo * mt) >= (cfg.angle_tolerance_deg.to_radians()).cos() - 1e-15;
                for b in 1..4 {
                    let (x, y) = (ob[b].as_slice()[i], tb[b].as_slice()[i]);
                    let k = if x == 0.0 {
                        0.0
                    } else {
                        (y / (x + x.signum() * cfg.ratio_eps)).clamp(0.0, 1.0)
                    };
                    let rc = k * x;
                    let rv = if !aligned {
                        rc
                    } else if !cfg.neg_mode {
                        y
                    } else if rc > 0.0 {
                        (rc * cfg.egl_dlm).min(y)
                    } else if rc < 0.0 {
                        (rc * cfg.egl_dlm).max(y)
                    } else {
                        rc
                    };
                    rest[b][i] = rv;
                    add[b][i] = y - rv;
                }
            }
            let wts = [0.0, w.vertical, w.diagonal, w.horizontal];
            let masked = Plane::from_fn(rows, cols, |i, j| {
                (1..4).map(|b| (add[b][i * cols + j] * wts[b]).abs()).sum()
            });
            let half = cm.rows() as isize / 2;
            let thr = Plane::from_fn(rows, cols, |i, j| {
                let mut s = 0.0;
                for a in 0..cm.rows() {
                    for c in 0..cm.cols() {
                        let ri = reflect_index(i as isize + a as isize - half, rows);
                        let ci = reflect_index(j as isize + c as isize - half, cols);
                        s += cm.get(a, c) * masked.get(ri, ci);
                    }
                }
                s * cfg.cm_threshold_factor
            });
            let reg = central_region((rows, cols), cfg.border_exclusion_fraction);
            for b in 1..4 {
                let (mut sn, mut sd) = (0.0, 0.0);
                for i in reg.top..reg.top + reg.rows {
                    for j in reg.left..reg.left + reg.cols {
                        let c = ((rest[b][i * cols + j] * wts[b]).abs() - thr.get(i, j)).max(0.0);
                        sn += c * c * c;
                        sd += (ob[b].get(i, j) * wts[b]).abs().powi(3);
                    }
                }
                num += sn.cbrt();
                den += sd.cbrt();
            }
            o = ob[0].clone();
            t = tb[0].clone();
        }
        num / den
    }

    fn score(r: &Plane, d: &Plane, cfg: &AdmConfig) -> f64 {
        let t = Tape::new();
        adm_score(&t, &t.constant(r.clone()), &t.constant(d.clone()), cfg)
            .unwrap()
            .item()
    }

    #[test]
    fn score_matches_oracle() {
        let r = synth::natural_frame(64, 72, 11);
        let cases = [
            (synth::blur(&r, 5, 1.2), false),
            (synth::add_noise(&r, 8.0, 3), false),
            (synth::unsharp(&r, 1.0), false),
            (synth::unsharp(&r, 1.0), true),
        ];
        for (d, neg) in cases {
            let cfg = AdmConfig {
                neg_mode: neg,
                ..Default::default()
            };
            let got = score(&r, &d, &cfg);
            let want = adm_oracle(&r, &d, &cfg);
            assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn score_examples() {
        let cfg = AdmConfig::default();
        let r = synth::natural_frame(64, 64, 2);
        assert!((score(&r, &r, &cfg) - 1.0).abs() < 1e-12);
        let blurred = score(&r, &synth::blur(&r, 7, 1.5), &cfg);
        assert!(blurred > 0.0 && blurred < 1.0, "{blurred}");

        let sharp = synth::unsharp(&r, 1.0);
        let base = score(&r, &sharp, &cfg);
        let neg = score(
            &r,
            &sharp,
            &AdmConfig {
                neg_mode: true,
                ..Default::default()
            },
        );
        assert!(neg <= base, "{neg} > {base}");

        let t = Tape::new();
        let flat = t.constant(Plane::filled(64, 64, 80.0));
        let err = adm_score(&t, &flat, &t.constant(r), &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericDomain(_)));
    }

    // Range of image columns that can reach a pooled coefficient.
    fn influential_columns(cols: usize, cfg: &AdmConfig) -> (usize, usize) {
        let radius = cfg.cm_kernel[0].len() / 2;
        let mut widths = vec![cols];
        for _ in 0..cfg.levels() {
            widths.push(widths.last().unwrap().div_ceil(2));
        }
        let (mut first, mut last) = (usize::MAX, 0);
        for l in 0..cfg.levels() {
            let reg = central_region((1, widths[l + 1]), cfg.border_exclusion_fraction);
            let mut lo = reg.left.saturating_sub(radius);
            let mut hi = (reg.left + reg.cols - 1 + radius).min(widths[l + 1] - 1);
            for n in widths[..=l].iter().rev() {
                lo = (2 * lo).saturating_sub(1);
                hi = (2 * hi + 2).min(n - 1);
            }
            first = first.min(lo);
            last = last.max(hi);
        }
        (first, last)
    }

    #[test]
    fn border_pixels_have_zero_gradient() {
        let cfg = AdmConfig::default();
        let cols = 1024;
        let r = synth::natural_frame(64, cols, 21);
        let t = Tape::new();
        let d = t.param(synth::add_noise(&synth::blur(&r, 5, 1.0), 3.0, 5));
        let s = adm_score(&t, &t.constant(r), &d, &cfg).unwrap();
        let g = t.backward(&s).unwrap().wrt(&d);
        let (first, last) = influential_columns(cols, &cfg);
        assert!(first > 8 && last < cols - 8, "{first} {last}");
        for row in 0..64 {
            for c in (0..first).chain(last + 1..cols) {
                assert_eq!(g.get(row, c), 0.0, "column {c}");
            }
        }
        let inner: f64 = (0..64).map(|row| g.get(row, first + 40).abs()).sum();
        assert!(inner > 0.0);
    }
}
