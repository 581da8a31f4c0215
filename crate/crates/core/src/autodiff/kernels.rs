//! Plane-level forward and adjoint kernels shared by the tape and by
//! gradient-free callers such as filter application.

use serde::{Deserialize, Serialize};

use super::plane::Plane;
use crate::error::{invalid, Result};

/// Boundary extension used by convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Mirror about the edge sample without repeating it: `x[-1] = x[1]`.
    #[default]
    Reflect,
    Zero,
}

/// Boundary extension used by the wavelet analysis filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Reflect,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Filter along columns and halve the row count.
    Rows,
    /// Filter along rows and halve the column count.
    Cols,
}

/// Mirror-without-repeat index mapping, valid for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[inline]
fn boundary_index(i: isize, n: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Reflect => reflect_index(i, n),
        Boundary::Periodic => i.rem_euclid(n as isize) as usize,
    }
}

fn check_conv(input: &Plane, kernel: &Plane, padding: Padding) -> Result<(usize, usize)> {
    let (kr, kc) = kernel.shape();
    if kr % 2 == 0 || kc % 2 == 0 {
        return Err(invalid(format!("kernel sides must be odd, got {kr}x{kc}")));
    }
    let (rr, rc) = (kr / 2, kc / 2);
    if padding == Padding::Reflect && (rr >= input.rows().max(2) || rc >= input.cols().max(2)) {
        return Err(invalid(format!(
            "{kr}x{kc} kernel is larger than the reflect-padded {}x{} input",
            input.rows(),
            input.cols()
        )));
    }
    Ok((rr, rc))
}

fn pad(input: &Plane, rr: usize, rc: usize, padding: Padding) -> Plane {
    let (rows, cols) = input.shape();
    Plane::from_fn(rows + 2 * rr, cols + 2 * rc, |pi, pj| {
        let i = pi as isize - rr as isize;
        let j = pj as isize - rc as isize;
        match padding {
            Padding::Reflect => input.get(reflect_index(i, rows), reflect_index(j, cols)),
            Padding::Zero => {
                if i < 0 || j < 0 || i >= rows as isize || j >= cols as isize {
                    0.0
                } else {
                    input.get(i as usize, j as usize)
                }
            }
        }
    })
}

/// Same-size cross-correlation of `input` with an odd-sided `kernel`.
pub fn conv2d(input: &Plane, kernel: &Plane, padding: Padding) -> Result<Plane> {
    let (rr, rc) = check_conv(input, kernel, padding)?;
    let padded = pad(input, rr, rc, padding);
    let (rows, cols) = input.shape();
    let (kr, kc) = kernel.shape();
    let pc = padded.cols();
    let src = padded.as_slice();
    let mut out = Plane::zeros(rows, cols);
    let dst = out.as_mut_slice();
    for i in 0..rows {
        let out_row = &mut dst[i * cols..(i + 1) * cols];
        for a in 0..kr {
            let prow = &src[(i + a) * pc..(i + a + 1) * pc];
            for b in 0..kc {
                let w = kernel.get(a, b);
                for (o, &x) in out_row.iter_mut().zip(&prow[b..b + cols]) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]: returns `(d input, d kernel)`.
pub fn conv2d_backward(
    input: &Plane,
    kernel: &Plane,
    padding: Padding,
    grad_out: &Plane,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Plane>, Option<Plane>)> {
    let (rr, rc) = check_conv(input, kernel, padding)?;
    let padded = pad(input, rr, rc, padding);
    let (rows, cols) = input.shape();
    let (kr, kc) = kernel.shape();
    let pc = padded.cols();
    let g = grad_out.as_slice();

    let grad_kernel = need_kernel.then(|| {
        let src = padded.as_slice();
        Plane::from_fn(kr, kc, |a, b| {
            let mut acc = 0.0;
            for i in 0..rows {
                let prow = &src[(i + a) * pc + b..(i + a) * pc + b + cols];
                let grow = &g[i * cols..(i + 1) * cols];
                acc += grow.iter().zip(prow).map(|(x, y)| x * y).sum::<f64>();
            }
            acc
        })
    });

    let grad_input = need_input.then(|| {
        let mut gpad = Plane::zeros(padded.rows(), pc);
        {
            let dst = gpad.as_mut_slice();
            for i in 0..rows {
                let grow = &g[i * cols..(i + 1) * cols];
                for a in 0..kr {
                    let prow = &mut dst[(i + a) * pc..(i + a + 1) * pc];
                    for b in 0..kc {
                        let w = kernel.get(a, b);
                        for (p, &x) in prow[b..b + cols].iter_mut().zip(grow) {
                            *p += w * x;
                        }
                    }
                }
            }
        }
        let mut gin = Plane::zeros(rows, cols);
        for pi in 0..gpad.rows() {
            let i = pi as isize - rr as isize;
            for pj in 0..pc {
                let j = pj as isize - rc as isize;
                let v = gpad.get(pi, pj);
                match padding {
                    Padding::Reflect => {
                        gin.add_at(reflect_index(i, rows), reflect_index(j, cols), v)
                    }
                    Padding::Zero => {
                        if i >= 0 && j >= 0 && i < rows as isize && j < cols as isize {
                            gin.add_at(i as usize, j as usize, v);
                        }
                    }
                }
            }
        }
        gin
    });
    Ok((grad_input, grad_kernel))
}

/// Keeps every even-indexed row and column; sizes are floor-halved.
pub fn decimate2(input: &Plane) -> Result<Plane> {
    let (rows, cols) = input.shape();
    if rows < 2 || cols < 2 {
        return Err(invalid(format!("cannot decimate a {rows}x{cols} plane")));
    }
    Ok(Plane::from_fn(rows / 2, cols / 2, |r, c| {
        input.get(2 * r, 2 * c)
    }))
}

pub fn decimate2_backward(input_shape: (usize, usize), grad_out: &Plane) -> Plane {
    let mut g = Plane::zeros(input_shape.0, input_shape.1);
    for r in 0..grad_out.rows() {
        for c in 0..grad_out.cols() {
            g.set(2 * r, 2 * c, grad_out.get(r, c));
        }
    }
    g
}

/// Non-overlapping 2x2 mean; sizes are floor-halved.
pub fn mean_pool2(input: &Plane) -> Result<Plane> {
    let (rows, cols) = input.shape();
    if rows < 2 || cols < 2 {
        return Err(invalid(format!("cannot pool a {rows}x{cols} plane")));
    }
    Ok(Plane::from_fn(rows / 2, cols / 2, |r, c| {
        0.25 * (input.get(2 * r, 2 * c)
            + input.get(2 * r, 2 * c + 1)
            + input.get(2 * r + 1, 2 * c)
            + input.get(2 * r + 1, 2 * c + 1))
    }))
}

pub fn mean_pool2_backward(input_shape: (usize, usize), grad_out: &Plane) -> Plane {
    let mut g = Plane::zeros(input_shape.0, input_shape.1);
    for r in 0..grad_out.rows() {
        for c in 0..grad_out.cols() {
            let v = 0.25 * grad_out.get(r, c);
            g.set(2 * r, 2 * c, v);
            g.set(2 * r, 2 * c + 1, v);
            g.set(2 * r + 1, 2 * c, v);
            g.set(2 * r + 1, 2 * c + 1, v);
        }
    }
    g
}

/// One-dimensional FIR analysis along `axis` followed by decimation by two.
///
/// Output sample `i` is `sum_k taps[k] * x[2i + offset + k]`, with out-of-range
/// indices resolved by `boundary`. The filtered axis shrinks to `ceil(n / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecimate {
    pub taps: Vec<f64>,
    pub offset: isize,
    pub axis: Axis,
    pub boundary: Boundary,
}

impl FilterDecimate {
    pub fn output_shape(&self, shape: (usize, usize)) -> (usize, usize) {
        match self.axis {
            Axis::Rows => (shape.0.div_ceil(2), shape.1),
            Axis::Cols => (shape.0, shape.1.div_ceil(2)),
        }
    }

    fn source(&self, i: usize, k: usize, n: usize) -> usize {
        boundary_index(2 * i as isize + self.offset + k as isize, n, self.boundary)
    }

    pub fn forward(&self, input: &Plane) -> Plane {
        let (rows, cols) = input.shape();
        let (orows, ocols) = self.output_shape((rows, cols));
        match self.axis {
            Axis::Rows => {
                let mut out = Plane::zeros(orows, ocols);
                for i in 0..orows {
                    for (k, &t) in self.taps.iter().enumerate() {
                        let src = input.row(self.source(i, k, rows));
                        let dst = &mut out.as_mut_slice()[i * ocols..(i + 1) * ocols];
                        for (o, &x) in dst.iter_mut().zip(src) {
                            *o += t * x;
                        }
                    }
                }
                out
            }
            Axis::Cols => {
                let idx: Vec<Vec<usize>> = (0..ocols)
                    .map(|j| {
                        (0..self.taps.len())
                            .map(|k| self.source(j, k, cols))
                            .collect()
                    })
                    .collect();
                Plane::from_fn(orows, ocols, |r, j| {
                    let row = input.row(r);
                    self.taps
                        .iter()
                        .zip(&idx[j])
                        .map(|(t, &s)| t * row[s])
                        .sum()
                })
            }
        }
    }

    pub fn backward(&self, input_shape: (usize, usize), grad_out: &Plane) -> Plane {
        let (rows, cols) = input_shape;
        let mut g = Plane::zeros(rows, cols);
        for r in 0..grad_out.rows() {
            for c in 0..grad_out.cols() {
                let v = grad_out.get(r, c);
                for (k, &t) in self.taps.iter().enumerate() {
                    match self.axis {
                        Axis::Rows => g.add_at(self.source(r, k, rows), c, t * v),
                        Axis::Cols => g.add_at(r, self.source(c, k, cols), t * v),
                    }
                }
            }
        }
        g
    }
}
