//! Analytic versus central-difference gradients of the score with respect
//! to a preprocessing kernel.

use std::fmt;
use std::io::Write;
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fault, Plane, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::filter_lab::{filtered_score, filtered_score_value, KernelFilter, OutputMode};
use crate::fusion::VmafModel;
use crate::media::write_luma_file;
use crate::vmaf::FeatureConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Every weight `1 / k^2`.
    #[default]
    Uniform,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub kernel_size: usize,
    pub epsilon: f64,
    /// Round and clamp the filtered frame to 8-bit levels in the numeric pass.
    pub emulate_integer_pipeline: bool,
    pub init_mode: InitMode,
    /// Smooth path: bound on `max |a - n| / max |a|`.
    pub tolerance: f64,
    /// Rounding path: bound on `mean |a - n| / mean |a|`.
    pub rounding_tolerance: f64,
    /// Smooth path only: compare differences at `eps` and `eps / 2` and
    /// shrink the step for entries whose interval straddles a jump.
    pub screen_discontinuities: bool,
    /// Disagreement, relative to the largest gradient entry, that marks a jump.
    pub screening_threshold: f64,
    pub max_refinements: usize,
    #[serde(skip)]
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            epsilon: 1e-2,
            emulate_integer_pipeline: false,
            init_mode: InitMode::Uniform,
            tolerance: 1e-3,
            rounding_tolerance: 1e-2,
            screen_discontinuities: true,
            screening_threshold: 1e-4,
            max_refinements: 4,
            fault: None,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(invalid(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn initial_kernel(&self) -> Result<KernelFilter> {
        match self.init_mode {
            InitMode::Uniform => KernelFilter::uniform(self.kernel_size),
            InitMode::Identity => KernelFilter::identity(self.kernel_size),
        }
    }

    fn output_mode(&self) -> OutputMode {
        if self.emulate_integer_pipeline {
            OutputMode::Quantized
        } else {
            OutputMode::Smooth
        }
    }
}

/// Reverse-mode gradient of `f` with respect to a kernel.
pub fn analytic_gradient_of<F>(kernel: &Plane, fault: Option<Fault>, f: F) -> Result<(f64, Plane)>
where
    F: FnOnce(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    tape.inject_fault(fault);
    let w = tape.param(kernel.clone());
    let out = f(&tape, &w)?;
    let g = tape.backward(&out)?;
    Ok((out.item(), g.wrt(&w)))
}

fn central_difference<F>(kernel: &Plane, index: usize, epsilon: f64, f: &F) -> Result<f64>
where
    F: Fn(&Plane) -> Result<f64>,
{
    let (r, c) = (index / kernel.cols(), index % kernel.cols());
    let mut plus = kernel.clone();
    plus.add_at(r, c, epsilon);
    let mut minus = kernel.clone();
    minus.add_at(r, c, -epsilon);
    Ok((f(&plus)? - f(&minus)?) / (2.0 * epsilon))
}

/// Central differences of `f` over every kernel entry, evaluated in parallel.
pub fn numeric_gradient_of<F>(kernel: &Plane, epsilon: f64, f: F) -> Result<Plane>
where
    F: Fn(&Plane) -> Result<f64> + Sync,
{
    let (rows, cols) = kernel.shape();
    let values = (0..rows * cols)
        .into_par_iter()
        .map(|i| central_difference(kernel, i, epsilon, &f))
        .collect::<Result<Vec<f64>>>()?;
    Plane::new(rows, cols, values)
}

/// Outcome of [`screened_gradient_of`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenedGradient {
    pub gradient: Plane,
    /// Entries re-estimated with a smaller step.
    pub refined: usize,
    /// Entries that still disagreed after the last refinement.
    pub unresolved: usize,
}

/// Central differences that detect a jump inside `[-eps, eps]`.
///
/// Each entry is estimated at `eps` and `eps / 2`. Where the two disagree by
/// more than `threshold * max |gradient|` the step is divided by four and the
/// pair recomputed, at most `max_refinements` times.
pub fn screened_gradient_of<F>(
    kernel: &Plane,
    epsilon: f64,
    threshold: f64,
    max_refinements: usize,
    f: F,
) -> Result<ScreenedGradient>
where
    F: Fn(&Plane) -> Result<f64> + Sync,
{
    let (rows, cols) = kernel.shape();
    let pairs = (0..rows * cols)
        .into_par_iter()
        .map(|i| {
            Ok((
                central_difference(kernel, i, epsilon, &f)?,
                central_difference(kernel, i, epsilon / 2.0, &f)?,
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let bound = threshold * pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let outcomes = pairs
        .into_par_iter()
        .enumerate()
        .map(|(i, (wide, narrow))| {
            if (wide - narrow).abs() <= bound {
                return Ok((wide, false, false));
            }
            let (mut step, mut estimate) = (epsilon, narrow);
            for _ in 0..max_refinements {
                step /= 4.0;
                let wide = central_difference(kernel, i, step, &f)?;
                estimate = central_difference(kernel, i, step / 2.0, &f)?;
                if (wide - estimate).abs() <= bound {
                    return Ok((estimate, true, false));
                }
            }
            Ok((estimate, true, true))
        })
        .collect::<Result<Vec<(f64, bool, bool)>>>()?;
    Ok(ScreenedGradient {
        gradient: Plane::new(rows, cols, outcomes.iter().map(|o| o.0).collect())?,
        refined: outcomes.iter().filter(|o| o.1).count(),
        unresolved: outcomes.iter().filter(|o| o.2).count(),
    })
}

/// Gradient of the single-frame score `VMAF(R, R * W)` with respect to `W`.
pub fn analytic_gradient(
    reference: &Plane,
    kernel: &KernelFilter,
    model: &VmafModel,
    cfg: &FeatureConfig,
    fault: Option<Fault>,
) -> Result<(f64, Plane)> {
    analytic_gradient_of(kernel.weights(), fault, |t, w| {
        Ok(filtered_score(t, std::slice::from_ref(reference), w, model, cfg)?.0)
    })
}

/// Scores a reference/distorted pair with an outside program.
///
/// The command is run through `sh -c` after substituting `{ref}`, `{dist}`,
/// `{width}` and `{height}`. The score is the number following the word
/// `score` in its output, or else the last number printed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalScorer {
    pub command: String,
}

impl ExternalScorer {
    pub fn score(&self, reference: &[Plane], dist: &[Plane]) -> Result<f64> {
        let dir = tempfile::tempdir()?;
        let rp = dir.path().join("ref.yuv");
        let dp = dir.path().join("dist.yuv");
        let fmt = write_luma_file(&rp, reference)?;
        write_luma_file(&dp, dist)?;
        let cmd = self
            .command
            .replace("{ref}", &shell_quote(&rp.to_string_lossy()))
            .replace("{dist}", &shell_quote(&dp.to_string_lossy()))
            .replace("{width}", &fmt.width.to_string())
            .replace("{height}", &fmt.height.to_string());
        let out = Command::new("sh").arg("-c").arg(&cmd).output()?;
        if !out.status.success() {
            return Err(Error::ExternalScorer(format!(
                "`{cmd}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        parse_scorer_output(&String::from_utf8_lossy(&out.stdout))
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Extracts a score from free-form program output.
pub fn parse_scorer_output(text: &str) -> Result<f64> {
    let tokens: Vec<&str> = text
        .split(|c: char| {
            c.is_whitespace() || c == ',' || c == '=' || c == ':' || c == '"' || c == ';'
        })
        .filter(|t| !t.is_empty())
        .collect();
    let number = |t: &str| t.parse::<f64>().ok().filter(|v| v.is_finite());
    for (i, t) in tokens.iter().enumerate() {
        if t.to_ascii_lowercase().ends_with("score") {
            if let Some(v) = tokens.get(i + 1).and_then(|n| number(n)) {
                return Ok(v);
            }
        }
    }
    tokens
        .iter()
        .rev()
        .find_map(|t| number(t))
        .ok_or_else(|| Error::ExternalScorer(format!("no score found in output {:?}", text.trim())))
}

/// Central-difference gradient of the score and bookkeeping about how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericGradient {
    pub gradient: Plane,
    /// Filtered samples outside `[0, 255]`, summed over all evaluations.
    pub out_of_range_samples: usize,
    pub refined: usize,
    pub unresolved: usize,
}

pub fn numeric_gradient(
    reference: &Plane,
    kernel: &KernelFilter,
    model: &VmafModel,
    cfg: &FeatureConfig,
    gcfg: &GradCheckConfig,
    external: Option<&ExternalScorer>,
) -> Result<NumericGradient> {
    let refs = std::slice::from_ref(reference);
    let clamped = std::sync::atomic::AtomicUsize::new(0);
    let eval = |w: &Plane| -> Result<f64> {
        let mode = if external.is_some() {
            OutputMode::Quantized
        } else {
            gcfg.output_mode()
        };
        let (dists, oor) = crate::filter_lab::filter_frames(refs, w, mode)?;
        clamped.fetch_add(oor, std::sync::atomic::Ordering::Relaxed);
        match external {
            Some(x) => x.score(refs, &dists),
            None => Ok(crate::vmaf::score_frames(refs, &dists, model, cfg)?.score),
        }
    };
    let smooth = external.is_none() && !gcfg.emulate_integer_pipeline;
    let screened = if smooth && gcfg.screen_discontinuities {
        screened_gradient_of(
            kernel.weights(),
            gcfg.epsilon,
            gcfg.screening_threshold,
            gcfg.max_refinements,
            eval,
        )?
    } else {
        let gradient = numeric_gradient_of(kernel.weights(), gcfg.epsilon, eval)?;
        ScreenedGradient {
            gradient,
            refined: 0,
            unresolved: 0,
        }
    };
    let n = clamped.into_inner();
    if n > 0 {
        let action = if smooth { "left unclamped" } else { "clamped" };
        log::warn!(
            "{n} filtered samples fell outside [0, 255] during finite differences ({action})"
        );
    }
    if screened.refined > 0 {
        log::info!(
            "{} kernel entries straddled a discontinuity and were re-estimated",
            screened.refined
        );
    }
    Ok(NumericGradient {
        gradient: screened.gradient,
        out_of_range_samples: n,
        refined: screened.refined,
        unresolved: screened.unresolved,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradEntry {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn deviation(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub kernel_size: usize,
    pub epsilon: f64,
    pub rounding: bool,
    /// Score at the unperturbed kernel.
    pub score: f64,
    pub entries: Vec<GradEntry>,
    pub max_abs_deviation: f64,
    pub mean_abs_deviation: f64,
    /// `max |a - n| / max |a|`.
    pub max_relative_deviation: f64,
    /// `mean |a - n| / mean |a|`.
    pub mean_relative_deviation: f64,
    pub mean_abs_analytic: f64,
    pub out_of_range_samples: usize,
    pub refined_entries: usize,
    pub unresolved_entries: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Entries whose deviation exceeds the tolerance on their own.
    pub offending: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn from_gradients(
        analytic: &Plane,
        numeric: &Plane,
        score: f64,
        gcfg: &GradCheckConfig,
        out_of_range_samples: usize,
    ) -> Result<Self> {
        Self::build(analytic, numeric, score, gcfg, out_of_range_samples, 0, 0)
    }

    fn build(
        analytic: &Plane,
        numeric: &Plane,
        score: f64,
        gcfg: &GradCheckConfig,
        out_of_range_samples: usize,
        refined_entries: usize,
        unresolved_entries: usize,
    ) -> Result<Self> {
        if analytic.shape() != numeric.shape() {
            return Err(invalid("gradient shapes differ"));
        }
        let cols = analytic.cols();
        let entries: Vec<GradEntry> = analytic
            .as_slice()
            .iter()
            .zip(numeric.as_slice())
            .enumerate()
            .map(|(i, (&a, &n))| GradEntry {
                row: i / cols,
                col: i % cols,
                analytic: a,
                numeric: n,
            })
            .collect();
        let count = entries.len() as f64;
        let max_abs_deviation = entries.iter().map(GradEntry::deviation).fold(0.0, f64::max);
        let mean_abs_deviation = entries.iter().map(GradEntry::deviation).sum::<f64>() / count;
        let max_abs_analytic = analytic.max_abs();
        let mean_abs_analytic = entries.iter().map(|e| e.analytic.abs()).sum::<f64>() / count;
        let ratio = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        let max_relative_deviation = ratio(max_abs_deviation, max_abs_analytic);
        let mean_relative_deviation = ratio(mean_abs_deviation, mean_abs_analytic);
        let rounding = gcfg.emulate_integer_pipeline;
        let (tolerance, measured, scale) = if rounding {
            (
                gcfg.rounding_tolerance,
                mean_relative_deviation,
                mean_abs_analytic,
            )
        } else {
            (gcfg.tolerance, max_relative_deviation, max_abs_analytic)
        };
        let passed = measured.is_finite() && measured < tolerance;
        let offending = entries
            .iter()
            .filter(|e| !(e.deviation() < tolerance * scale))
            .copied()
            .collect();
        Ok(Self {
            kernel_size: analytic.rows(),
            epsilon: gcfg.epsilon,
            rounding,
            score,
            entries,
            max_abs_deviation,
            mean_abs_deviation,
            max_relative_deviation,
            mean_relative_deviation,
            mean_abs_analytic,
            out_of_range_samples,
            refined_entries,
            unresolved_entries,
            tolerance,
            passed,
            offending,
        })
    }

    /// `row,col,analytic,numeric,abs_deviation`, one line per kernel entry.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "row,col,analytic,numeric,abs_deviation")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.row,
                e.col,
                e.analytic,
                e.numeric,
                e.deviation()
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = if self.rounding { "rounded" } else { "smooth" };
        writeln!(
            f,
            "gradcheck k={} eps={:e} path={mode} score={:.6}",
            self.kernel_size, self.epsilon, self.score
        )?;
        writeln!(
            f,
            "mean |analytic| {:.6}  max |a-n| {:.6e}  mean |a-n| {:.6e}",
            self.mean_abs_analytic, self.max_abs_deviation, self.mean_abs_deviation
        )?;
        writeln!(
            f,
            "max rel {:.3e}  mean rel {:.3e}  tolerance {:.1e}",
            self.max_relative_deviation, self.mean_relative_deviation, self.tolerance
        )?;
        writeln!(
            f,
            "out-of-range samples {}  refined entries {}  unresolved entries {}",
            self.out_of_range_samples, self.refined_entries, self.unresolved_entries
        )?;
        for e in &self.offending {
            writeln!(
                f,
                "  offending W[{}][{}]: analytic {:.6} numeric {:.6}",
                e.row, e.col, e.analytic, e.numeric
            )?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Runs both gradients on one frame with clipping disabled.
pub fn gradcheck_report(
    reference: &Plane,
    model: &VmafModel,
    cfg: &FeatureConfig,
    gcfg: &GradCheckConfig,
    external: Option<&ExternalScorer>,
) -> Result<GradCheckReport> {
    gcfg.validate()?;
    let model = model.clone().with_clip(false);
    let kernel = gcfg.initial_kernel()?;
    let (score, analytic) = analytic_gradient(reference, &kernel, &model, cfg, gcfg.fault)?;
    let n = numeric_gradient(reference, &kernel, &model, cfg, gcfg, external)?;
    GradCheckReport::build(
        &analytic,
        &n.gradient,
        score,
        gcfg,
        n.out_of_range_samples,
        n.refined,
        n.unresolved,
    )
}

/// Score of a single frame filtered by `kernel`, without gradients.
pub fn single_frame_score(
    reference: &Plane,
    kernel: &Plane,
    model: &VmafModel,
    cfg: &FeatureConfig,
    rounding: bool,
) -> Result<f64> {
    let mode = if rounding {
        OutputMode::Quantized
    } else {
        OutputMode::Smooth
    };
    Ok(
        filtered_score_value(std::slice::from_ref(reference), kernel, model, cfg, mode)?
            .0
            .score,
    )
}
