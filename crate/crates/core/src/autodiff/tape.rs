use std::cell::{Cell, RefCell};
use std::f64::consts::LN_2;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, FilterDecimate, Padding};
use super::plane::Plane;
use crate::error::{invalid, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value produced on a [`Tape`].
///
/// Values that do not depend on any parameter carry no tape node; only
/// gradient-carrying values are recorded.
#[derive(Clone)]
pub struct Var {
    value: Rc<Plane>,
    node: Option<usize>,
    tape: u64,
}

impl Var {
    pub fn value(&self) -> &Plane {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Scalar value; panics on non-scalar vars.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    fn input(&self) -> Input {
        Input {
            value: Rc::clone(&self.value),
            node: self.node,
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

/// Axis-aligned rectangle of a plane, `[top, top+rows) x [left, left+cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RectRegion {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

impl RectRegion {
    pub fn full(shape: (usize, usize)) -> Self {
        Self {
            top: 0,
            left: 0,
            rows: shape.0,
            cols: shape.1,
        }
    }
}

/// Test hook that corrupts a backward rule so the gradient checker can be
/// shown to catch it.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiply one entry of every conv2d kernel gradient by `factor`.
    KernelGradScale { row: usize, col: usize, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind {
    Relu,
    Abs,
    Cube,
    Cbrt,
    Exp,
    Clip { lo: f64, hi: f64 },
    MinScalar(f64),
    MaxScalar(f64),
    Scale(f64),
    AddScalar(f64),
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Abs => x.abs(),
            Self::Cube => x * x * x,
            Self::Cbrt => x.cbrt(),
            Self::Exp => x.exp(),
            Self::Clip { lo, hi } => x.clamp(lo, hi),
            Self::MinScalar(c) => {
                if x <= c {
                    x
                } else {
                    c
                }
            }
            Self::MaxScalar(c) => {
                if x >= c {
                    x
                } else {
                    c
                }
            }
            Self::Scale(s) => x * s,
            Self::AddScalar(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`, with one-sided conventions at kinks.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => f64::from(u8::from(x > 0.0)),
            Self::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Self::Cube => 3.0 * x * x,
            Self::Cbrt => {
                if y == 0.0 {
                    0.0
                } else {
                    1.0 / (3.0 * y * y)
                }
            }
            Self::Exp => y,
            Self::Clip { lo, hi } => f64::from(u8::from(x >= lo && x <= hi)),
            Self::MinScalar(c) => f64::from(u8::from(x <= c)),
            Self::MaxScalar(c) => f64::from(u8::from(x >= c)),
            Self::Scale(s) => s,
            Self::AddScalar(_) => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    DivStable(f64),
    Min,
    Max,
    Log2OnePlusRatio,
}

impl BinaryKind {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Div => a / b,
            Self::DivStable(eps) => {
                if b == 0.0 {
                    0.0
                } else {
                    a / (b + eps.copysign(b))
                }
            }
            Self::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
            Self::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
            Self::Log2OnePlusRatio => (a / b).ln_1p() / LN_2,
        }
    }

    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Self::Add => (1.0, 1.0),
            Self::Sub => (1.0, -1.0),
            Self::Mul => (b, a),
            Self::Div => (1.0 / b, -a / (b * b)),
            Self::DivStable(eps) => {
                if b == 0.0 {
                    (0.0, 0.0)
                } else {
                    let d = b + eps.copysign(b);
                    (1.0 / d, -a / (d * d))
                }
            }
            Self::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Self::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Self::Log2OnePlusRatio => {
                let s = (a + b) * LN_2;
                (1.0 / s, -a / (b * s))
            }
        }
    }
}

#[derive(Clone)]
struct Input {
    value: Rc<Plane>,
    node: Option<usize>,
}

enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: Input,
        y: Rc<Plane>,
    },
    Binary {
        kind: BinaryKind,
        a: Input,
        b: Input,
    },
    Conv2d {
        input: Input,
        kernel: Input,
        padding: Padding,
    },
    Decimate2 {
        input: Input,
    },
    MeanPool2 {
        input: Input,
    },
    FilterDecimate {
        input: Input,
        filter: FilterDecimate,
    },
    Select {
        mask: Rc<Vec<bool>>,
        a: Input,
        b: Input,
    },
    Sum {
        input: Input,
        region: RectRegion,
    },
    Concat {
        parts: Vec<Input>,
    },
}

struct Node {
    op: Op,
}

/// Records gradient-carrying operations for reverse-mode differentiation.
///
/// A tape is single-threaded. Build one per forward pass and drop it after
/// [`Tape::backward`].
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<Fault>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every parameter on a tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Plane>>,
}

impl Gradients {
    /// Gradient for `var`; zero when `var` does not reach the root.
    pub fn wrt(&self, var: &Var) -> Plane {
        let (r, c) = var.shape();
        match var.node {
            Some(n) if var.tape == self.tape => self
                .grads
                .get(n)
                .and_then(Clone::clone)
                .unwrap_or_else(|| Plane::zeros(r, c)),
            _ => Plane::zeros(r, c),
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(usize, usize)> {
    if a == b || b == (1, 1) {
        Ok(a)
    } else if a == (1, 1) {
        Ok(b)
    } else {
        Err(invalid(format!("{what}: shape mismatch {a:?} vs {b:?}")))
    }
}

#[inline]
fn at(p: &Plane, i: usize) -> f64 {
    if p.is_scalar() {
        p.as_slice()[0]
    } else {
        p.as_slice()[i]
    }
}

fn reduce_to(grad: Plane, shape: (usize, usize)) -> Plane {
    if grad.shape() == shape {
        grad
    } else {
        Plane::scalar(grad.sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.fault.set(fault);
    }

    /// Number of recorded (gradient-carrying) nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Plane) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
            tape: self.id,
        }
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Plane::scalar(value))
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Plane) -> Var {
        let node = self.push(Op::Leaf);
        Var {
            value: Rc::new(value),
            node: Some(node),
            tape: self.id,
        }
    }

    fn push(&self, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op });
        nodes.len() - 1
    }

    fn check(&self, v: &Var) -> Result<()> {
        if v.node.is_some() && v.tape != self.id {
            return Err(Error::InvalidState(
                "var belongs to a different tape".into(),
            ));
        }
        Ok(())
    }

    fn emit(&self, value: Plane, inputs: &[&Var], op: impl FnOnce() -> Op) -> Var {
        let node = inputs
            .iter()
            .any(|v| v.node.is_some())
            .then(|| self.push(op()));
        Var {
            value: Rc::new(value),
            node,
            tape: self.id,
        }
    }

    pub(crate) fn unary(&self, kind: UnaryKind, x: &Var) -> Result<Var> {
        self.check(x)?;
        let y = Rc::new(x.value.map(|v| kind.apply(v)));
        let node = x.node.map(|_| {
            self.push(Op::Unary {
                kind,
                x: x.input(),
                y: Rc::clone(&y),
            })
        });
        Ok(Var {
            value: y,
            node,
            tape: self.id,
        })
    }

    pub(crate) fn binary(&self, kind: BinaryKind, a: &Var, b: &Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (rows, cols) = broadcast_shape(a.shape(), b.shape(), "elementwise op")?;
        let (pa, pb) = (a.value(), b.value());
        match kind {
            BinaryKind::Div if pb.as_slice().contains(&0.0) => {
                return Err(Error::NumericDomain("division by exact zero".into()));
            }
            BinaryKind::Log2OnePlusRatio if pb.as_slice().iter().any(|&d| d <= 0.0) => {
                return Err(Error::NumericDomain("log2(1 + a/b) needs b > 0".into()));
            }
            _ => {}
        }
        let data = (0..rows * cols)
            .map(|i| kind.apply(at(pa, i), at(pb, i)))
            .collect();
        let value = Plane::new(rows, cols, data)?;
        Ok(self.emit(value, &[a, b], || Op::Binary {
            kind,
            a: a.input(),
            b: b.input(),
        }))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `a / b`; fails with a numeric-domain error on any zero denominator.
    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `a / (b + sign(b) * eps)`, defined as 0 where `b == 0`.
    pub fn div_stable(&self, a: &Var, b: &Var, eps: f64) -> Result<Var> {
        self.binary(BinaryKind::DivStable(eps), a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    /// `log2(1 + a / b)` for `b > 0`.
    pub fn log2_1p_ratio(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Log2OnePlusRatio, a, b)
    }

    pub fn relu(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn abs(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn cube(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryKind::Cube, x)
    }

    /// Cube root. The derivative at exactly zero is taken as 0.
    pub fn cbrt(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryKind::Cbrt, x)
    }

    pub fn exp(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn clip(&self, x: &Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid(format!("clip bounds reversed: [{lo}, {hi}]")));
        }
        self.unary(UnaryKind::Clip { lo, hi }, x)
    }

    pub fn min_scalar(&self, x: &Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MinScalar(c), x)
    }

    pub fn max_scalar(&self, x: &Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MaxScalar(c), x)
    }

    pub fn scale(&self, x: &Var, s: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(s), x)
    }

    pub fn add_scalar(&self, x: &Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn square(&self, x: &Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Same-size cross-correlation; see [`kernels::conv2d`].
    pub fn conv2d(&self, input: &Var, kernel: &Var, padding: Padding) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let value = kernels::conv2d(input.value(), kernel.value(), padding)?;
        Ok(self.emit(value, &[input, kernel], || Op::Conv2d {
            input: input.input(),
            kernel: kernel.input(),
            padding,
        }))
    }

    pub fn decimate2(&self, input: &Var) -> Result<Var> {
        self.check(input)?;
        let value = kernels::decimate2(input.value())?;
        Ok(self.emit(value, &[input], || Op::Decimate2 {
            input: input.input(),
        }))
    }

    pub fn mean_pool2(&self, input: &Var) -> Result<Var> {
        self.check(input)?;
        let value = kernels::mean_pool2(input.value())?;
        Ok(self.emit(value, &[input], || Op::MeanPool2 {
            input: input.input(),
        }))
    }

    /// Blur then decimate by two. Without a kernel the blur is a 2x2 mean.
    pub fn downsample2x(&self, input: &Var, kernel: Option<&Var>) -> Result<Var> {
        let (rows, cols) = input.shape();
        if rows < 2 || cols < 2 {
            return Err(invalid(format!(
                "downsample2x needs at least 2x2, got {rows}x{cols}"
            )));
        }
        match kernel {
            None => self.mean_pool2(input),
            Some(k) => {
                let blurred = self.conv2d(input, k, Padding::Reflect)?;
                self.decimate2(&blurred)
            }
        }
    }

    pub fn filter_decimate(&self, input: &Var, filter: &FilterDecimate) -> Result<Var> {
        self.check(input)?;
        let value = filter.forward(input.value());
        Ok(self.emit(value, &[input], || Op::FilterDecimate {
            input: input.input(),
            filter: filter.clone(),
        }))
    }

    /// Picks `a` where `mask` is set and `b` elsewhere. The mask is treated
    /// as a constant during differentiation.
    pub fn select(&self, mask: Rc<Vec<bool>>, a: &Var, b: &Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if a.shape() != b.shape() || mask.len() != a.value().len() {
            return Err(invalid("select: shape mismatch"));
        }
        let (rows, cols) = a.shape();
        let data = mask
            .iter()
            .zip(a.value().as_slice().iter().zip(b.value().as_slice()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let value = Plane::new(rows, cols, data)?;
        Ok(self.emit(value, &[a, b], || Op::Select {
            mask,
            a: a.input(),
            b: b.input(),
        }))
    }

    /// Sum over `region`, returned as a `1 x 1` var.
    pub fn sum_region(&self, input: &Var, region: RectRegion) -> Result<Var> {
        self.check(input)?;
        let (rows, cols) = input.shape();
        if region.rows == 0 || region.cols == 0 {
            return Err(invalid("sum over an empty region"));
        }
        if region.top + region.rows > rows || region.left + region.cols > cols {
            return Err(invalid(format!(
                "region {region:?} outside {rows}x{cols} plane"
            )));
        }
        let p = input.value();
        let mut acc = 0.0;
        for r in region.top..region.top + region.rows {
            acc += p.row(r)[region.left..region.left + region.cols]
                .iter()
                .sum::<f64>();
        }
        Ok(self.emit(Plane::scalar(acc), &[input], || Op::Sum {
            input: input.input(),
            region,
        }))
    }

    pub fn sum(&self, input: &Var) -> Result<Var> {
        self.sum_region(input, RectRegion::full(input.shape()))
    }

    pub fn mean(&self, input: &Var) -> Result<Var> {
        let n = input.value().len() as f64;
        let s = self.sum(input)?;
        self.scale(&s, 1.0 / n)
    }

    /// Joins scalar vars into a `1 x n` row.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat of nothing"));
        }
        for p in parts {
            self.check(p)?;
            if !p.value().is_scalar() {
                return Err(invalid("concat expects scalar vars"));
            }
        }
        let value = Plane::new(1, parts.len(), parts.iter().map(Var::item).collect())?;
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(self.emit(value, &refs, || Op::Concat {
            parts: parts.iter().map(Var::input).collect(),
        }))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if !root.value().is_scalar() {
            let (r, c) = root.shape();
            return Err(invalid(format!(
                "backward root must be scalar, got {r}x{c}"
            )));
        }
        let root_node = match root.node {
            Some(n) if root.tape == self.id => n,
            _ => {
                return Err(Error::InvalidState(
                    "backward root is not recorded on this tape".into(),
                ))
            }
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Plane>> = vec![None; nodes.len()];
        grads[root_node] = Some(Plane::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Plane>>, input: &Input, g: Plane| {
            if let Some(n) = input.node {
                let g = reduce_to(g, input.value.shape());
                match &mut grads[n] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        };

        for idx in (0..=root_node).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Unary { kind, x, y } => {
                    let gx = Plane::new(
                        g.rows(),
                        g.cols(),
                        g.as_slice()
                            .iter()
                            .zip(x.value.as_slice().iter().zip(y.as_slice()))
                            .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                            .collect(),
                    )?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Binary { kind, a, b } => {
                    let n = g.len();
                    let mut ga = Vec::with_capacity(n);
                    let mut gb = Vec::with_capacity(n);
                    for i in 0..n {
                        let (da, db) = kind.partials(at(&a.value, i), at(&b.value, i));
                        let gv = g.as_slice()[i];
                        ga.push(gv * da);
                        gb.push(gv * db);
                    }
                    if a.node.is_some() {
                        accumulate(&mut grads, a, Plane::new(g.rows(), g.cols(), ga)?);
                    }
                    if b.node.is_some() {
                        accumulate(&mut grads, b, Plane::new(g.rows(), g.cols(), gb)?);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    padding,
                } => {
                    let (gi, gk) = kernels::conv2d_backward(
                        &input.value,
                        &kernel.value,
                        *padding,
                        &g,
                        input.node.is_some(),
                        kernel.node.is_some(),
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads, input, gi);
                    }
                    if let Some(mut gk) = gk {
                        if let Some(Fault::KernelGradScale { row, col, factor }) = self.fault.get()
                        {
                            if row < gk.rows() && col < gk.cols() {
                                gk.set(row, col, gk.get(row, col) * factor);
                            }
                        }
                        accumulate(&mut grads, kernel, gk);
                    }
                }
                Op::Decimate2 { input } => {
                    let gi = kernels::decimate2_backward(input.value.shape(), &g);
                    accumulate(&mut grads, input, gi);
                }
                Op::MeanPool2 { input } => {
                    let gi = kernels::mean_pool2_backward(input.value.shape(), &g);
                    accumulate(&mut grads, input, gi);
                }
                Op::FilterDecimate { input, filter } => {
                    let gi = filter.backward(input.value.shape(), &g);
                    accumulate(&mut grads, input, gi);
                }
                Op::Select { mask, a, b } => {
                    let pick = |want: bool| {
                        g.as_slice()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gv, &m)| if m == want { gv } else { 0.0 })
                            .collect::<Vec<_>>()
                    };
                    if a.node.is_some() {
                        accumulate(&mut grads, a, Plane::new(g.rows(), g.cols(), pick(true))?);
                    }
                    if b.node.is_some() {
                        accumulate(&mut grads, b, Plane::new(g.rows(), g.cols(), pick(false))?);
                    }
                }
                Op::Sum { input, region } => {
                    let gv = g.item();
                    let (rows, cols) = input.value.shape();
                    let mut gi = Plane::zeros(rows, cols);
                    for r in region.top..region.top + region.rows {
                        for c in region.left..region.left + region.cols {
                            gi.set(r, c, gv);
                        }
                    }
                    accumulate(&mut grads, input, gi);
                }
                Op::Concat { parts } => {
                    for (i, p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, Plane::scalar(g.as_slice()[i]));
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}
