use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Plane;
use crate::error::{invalid, parse_err, Result};
use crate::vif::gaussian_taps;

/// Largest kernel side accepted from files.
pub const MAX_KERNEL_SIZE: usize = 63;

/// Square, odd-sided convolution kernel used as a preprocessing filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFilter {
    weights: Plane,
    /// Amplification the kernel was built with (`W = I + alpha * W_hat`).
    alpha: f64,
}

fn check_size(k: usize) -> Result<()> {
    if k.is_multiple_of(2) || k == 0 || k > MAX_KERNEL_SIZE {
        return Err(invalid(format!(
            "kernel size must be odd and <= {MAX_KERNEL_SIZE}, got {k}"
        )));
    }
    Ok(())
}

impl KernelFilter {
    pub fn from_weights(weights: Plane) -> Result<Self> {
        if weights.rows() != weights.cols() {
            return Err(invalid(format!(
                "kernel must be square, got {:?}",
                weights.shape()
            )));
        }
        check_size(weights.rows())?;
        if !weights.is_finite() {
            return Err(invalid("kernel weights must be finite"));
        }
        Ok(Self {
            weights,
            alpha: 1.0,
        })
    }

    /// 1 at the centre, 0 elsewhere.
    pub fn identity(k: usize) -> Result<Self> {
        check_size(k)?;
        let c = k / 2;
        Ok(Self {
            weights: Plane::from_fn(k, k, |r, col| f64::from(u8::from(r == c && col == c))),
            alpha: 0.0,
        })
    }

    /// Every weight `1 / k^2`.
    pub fn uniform(k: usize) -> Result<Self> {
        check_size(k)?;
        Ok(Self {
            weights: Plane::filled(k, k, 1.0 / (k * k) as f64),
            alpha: 1.0,
        })
    }

    pub fn size(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Plane {
        &self.weights
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sum(&self) -> f64 {
        self.weights.sum()
    }

    /// `W - I`.
    pub fn residual(&self) -> Plane {
        let c = self.size() / 2;
        let mut r = self.weights.clone();
        r.set(c, c, r.get(c, c) - 1.0);
        r
    }

    /// `I + alpha * (W - I)`.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let c = self.size() / 2;
        let mut w = self.residual().scale(alpha);
        w.set(c, c, w.get(c, c) + 1.0);
        Self {
            weights: w,
            alpha: self.alpha * alpha,
        }
    }

    /// Divides every weight by the kernel sum.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.sum();
        if !(s.abs() > 1e-8) || !s.is_finite() {
            return Err(invalid(format!("cannot normalise a kernel summing to {s}")));
        }
        Ok(Self {
            weights: self.weights.scale(1.0 / s),
            alpha: self.alpha,
        })
    }

    /// `(max |w_ij - w_ji|, max |W - rot90(W)|)`.
    pub fn symmetry_residuals(&self) -> (f64, f64) {
        let k = self.size();
        let mut transpose: f64 = 0.0;
        let mut rot: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let w = self.weights.get(i, j);
                transpose = transpose.max((w - self.weights.get(j, i)).abs());
                rot = rot.max((w - self.weights.get(j, k - 1 - i)).abs());
            }
        }
        (transpose, rot)
    }

    /// Plain-text form: the size, then `k` rows of `k` weights. Round-trips
    /// exactly through [`KernelFilter::from_text`].
    pub fn to_text(&self) -> String {
        let k = self.size();
        let mut s = format!("{k}\n");
        for r in 0..k {
            let row: Vec<String> = self
                .weights
                .row(r)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Parses [`KernelFilter::to_text`] output. Lines starting with `#` are
    /// comments.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace);
        let k: usize = tokens
            .next()
            .ok_or_else(|| parse_err("filter file", "empty"))?
            .parse()
            .map_err(|e| parse_err("filter file", format!("bad size: {e}")))?;
        check_size(k).map_err(|e| parse_err("filter file", e.to_string()))?;
        let mut data = Vec::with_capacity(k * k);
        for i in 0..k * k {
            let tok = tokens.next().ok_or_else(|| {
                parse_err(
                    "filter file",
                    format!("expected {} weights, got {i}", k * k),
                )
            })?;
            let v: f64 = tok
                .parse()
                .map_err(|e| parse_err("filter file", format!("weight {i} ({tok:?}): {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(
                    "filter file",
                    format!("weight {i} is not finite"),
                ));
            }
            data.push(v);
        }
        if let Some(extra) = tokens.next() {
            return Err(parse_err(
                "filter file",
                format!("trailing token {extra:?}"),
            ));
        }
        Self::from_weights(Plane::new(k, k, data)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Unsharp mask `U = I + alpha * (I - G)` with a normalised `k x k` Gaussian.
pub fn unsharp_kernel(k: usize, sigma: f64, alpha: f64) -> Result<KernelFilter> {
    check_size(k)?;
    if !(sigma > 0.0) {
        return Err(invalid(format!(
            "unsharp sigma must be positive, got {sigma}"
        )));
    }
    let taps = gaussian_taps(k, sigma);
    let c = k / 2;
    let weights = Plane::from_fn(k, k, |r, col| {
        let id = f64::from(u8::from(r == c && col == c));
        id + alpha * (id - taps[r] * taps[col])
    });
    Ok(KernelFilter { weights, alpha })
}
