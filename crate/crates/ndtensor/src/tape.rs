//! Append-only tape recording tensor operations for reverse-mode differentiation.
//!
//! Every value produced during a forward pass lives on the [`Tape`] and is
//! addressed by a [`Var`] handle. A node is *tracked* when it is a tracked leaf
//! or when any of its inputs is tracked; only tracked nodes carry an op record
//! and take part in [`Tape::backward`].

use crate::{Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of operation recorded in a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Sigmoid,
    Exp,
    Sin,
    Square,
    Recip,
    Softplus,
    Prelu,
    ClampMin,
    Sum,
    Mean,
    RowSums,
    Broadcast,
    SliceCols,
    Reshape,
    Im2Col,
}

/// How the right operand of a binary op (or the input of a broadcast) maps
/// onto the output shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// Length-`n` row repeated over `m` rows.
    Row,
    /// `[m, 1]` column repeated over `n` columns.
    Col,
}

/// Geometry of a square-kernel convolution over an NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Length of one patch row: `kernel * kernel * channels`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Scale(f64),
    AddScalar,
    Tanh,
    Sigmoid,
    Exp,
    Sin,
    Square,
    Recip,
    Softplus,
    Prelu,
    ClampMin(f64),
    Sum,
    Mean,
    RowSums,
    Broadcast(Bcast),
    SliceCols { start: usize },
    Reshape,
    Im2Col(ConvGeom),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Add(_) => OpKind::Add,
            Op::Sub(_) => OpKind::Sub,
            Op::Mul(_) => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Tanh => OpKind::Tanh,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Exp => OpKind::Exp,
            Op::Sin => OpKind::Sin,
            Op::Square => OpKind::Square,
            Op::Recip => OpKind::Recip,
            Op::Softplus => OpKind::Softplus,
            Op::Prelu => OpKind::Prelu,
            Op::ClampMin(_) => OpKind::ClampMin,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::RowSums => OpKind::RowSums,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Reshape => OpKind::Reshape,
            Op::Im2Col(_) => OpKind::Im2Col,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. a tracked leaf. `None` for untracked or
    /// intermediate values.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a tracked leaf, moved out of the map.
    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    tracking: bool,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
            consumed: false,
        }
    }

    /// A tape on which [`Tape::leaf`] creates untracked values. Forward values
    /// are computed by the same kernels as on a tracking tape.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
            consumed: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input. Untracked when the tape has tracking disabled.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let tracked = self.tracking;
        self.push(value, Op::Leaf, Vec::new(), tracked)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    pub fn op_kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].inputs
    }

    /// Every value on the tape, in insertion order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, tracked: bool) -> Var {
        let id = Var(self.nodes.len());
        let node = if tracked {
            Node {
                value,
                op,
                inputs,
                tracked,
            }
        } else {
            Node {
                value,
                op: Op::Leaf,
                inputs: Vec::new(),
                tracked,
            }
        };
        self.nodes.push(node);
        id
    }

    fn push_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let tracked = self.nodes[x.0].tracked;
        self.push(value, op, vec![x], tracked)
    }

    // ---- elementwise unary ----

    pub fn tanh(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Exp, f64::exp)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Sin, f64::sin)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Square, |v| v * v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Recip, |v| 1.0 / v)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.push_unary(x, Op::Softplus, softplus)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.push_unary(x, Op::Scale(factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.push_unary(x, Op::AddScalar, |v| v + offset)
    }

    /// `max(x, floor)`; the gradient is zero wherever `x <= floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.push_unary(x, Op::ClampMin(floor), |v| v.max(floor))
    }

    /// Parametric ReLU with a single learnable slope (`slope` holds one value).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var, TensorError> {
        let a_t = &self.nodes[slope.0].value;
        if a_t.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                lhs: self.shape(x).to_vec(),
                rhs: a_t.shape().to_vec(),
            });
        }
        let a = a_t.item();
        let src = &self.nodes[x.0].value;
        let data = src
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { a * v })
            .collect();
        let value = Tensor::new(src.shape(), data)?;
        let tracked = self.nodes[x.0].tracked || self.nodes[slope.0].tracked;
        Ok(self.push(value, Op::Prelu, vec![x, slope], tracked))
    }

    // ---- binary with right-hand broadcast ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Bcast) -> Op,
    ) -> Result<Var, TensorError> {
        let lhs = &self.nodes[a.0].value;
        let rhs = &self.nodes[b.0].value;
        let rule = bcast_rule(name, lhs.shape(), rhs.shape())?;
        let (_, n) = lhs.dims2().unwrap_or((1, lhs.numel()));
        let bd = rhs.data();
        let data: Vec<f64> = match rule {
            Bcast::Same => lhs.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => lhs.data().iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => lhs
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect(),
            Bcast::Col => lhs
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i / n]))
                .collect(),
        };
        let value = Tensor::new(lhs.shape(), data)?;
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        Ok(self.push(value, make(rule), vec![a, b], tracked))
    }

    /// Repeat `x` to a rank-2 `shape`. Accepted sources: a single value, a
    /// length-`n` row (`[n]` or `[1, n]`), or an `[m, 1]` column.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let src = &self.nodes[x.0].value;
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: shape.to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        let rule = bcast_rule("broadcast", shape, src.shape())?;
        let (m, n) = (shape[0], shape[1]);
        let sd = src.data();
        let data: Vec<f64> = match rule {
            Bcast::Same => sd.to_vec(),
            Bcast::Scalar => vec![sd[0]; m * n],
            Bcast::Row => (0..m * n).map(|i| sd[i % n]).collect(),
            Bcast::Col => (0..m * n).map(|i| sd[i / n]).collect(),
        };
        let value = Tensor::new(shape, data)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::Broadcast(rule), vec![x], tracked))
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let at = &self.nodes[a.0].value;
        let bt = &self.nodes[b.0].value;
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: at.shape().to_vec(),
            rhs: bt.shape().to_vec(),
        };
        let (m, k) = match at.shape() {
            [m, k] => (*m, *k),
            _ => return Err(mismatch()),
        };
        let (k2, n) = match bt.shape() {
            [k2, n] => (*k2, *n),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, at.data(), (k, 1), bt.data(), (n, 1), &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        Ok(self.push(value, Op::MatMul, vec![a, b], tracked))
    }

    // ---- reductions and reshaping ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::Sum, vec![x], tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::Mean, vec![x], tracked)
    }

    /// Per-row sums of a rank-2 tensor, shaped `[m, 1]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let (m, n) = match t.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(TensorError::InvalidShape {
                    shape: s.to_vec(),
                    reason: "row_sums expects a rank-2 tensor",
                })
            }
        };
        let data = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(&[m, 1], data)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::RowSums, vec![x], tracked))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let (m, n) = match t.shape() {
            [m, n] if start < end && end <= *n => (*m, *n),
            s => {
                return Err(TensorError::InvalidShape {
                    shape: s.to_vec(),
                    reason: "slice_cols range outside the column count",
                })
            }
        };
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        let value = Tensor::new(&[m, w], data)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::SliceCols { start }, vec![x], tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::Reshape, vec![x], tracked))
    }

    /// Unfold an NHWC input `[batch, height, width, channels]` into patch rows
    /// `[batch * out_h * out_w, kernel * kernel * channels]`, zero-padded.
    /// Patch columns are ordered `(ky, kx, channel)`.
    pub fn im2col(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let geom = match t.shape() {
            [b, h, w, c] if kernel > 0 && stride > 0 && h + 2 * pad >= kernel && w + 2 * pad >= kernel => {
                ConvGeom {
                    batch: *b,
                    height: *h,
                    width: *w,
                    channels: *c,
                    kernel,
                    stride,
                    pad,
                }
            }
            s => {
                return Err(TensorError::InvalidShape {
                    shape: s.to_vec(),
                    reason: "im2col expects [batch, height, width, channels] at least kernel-sized",
                })
            }
        };
        let rows = geom.batch * geom.out_height() * geom.out_width();
        let mut out = vec![0.0; rows * geom.patch_len()];
        im2col_visit(&geom, |src, dst| out[dst] = t.data()[src]);
        let value = Tensor::new(&[rows, geom.patch_len()], out)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::Im2Col(geom), vec![x], tracked))
    }

    // ---- backward ----

    /// Propagate d(root)/d(node) back through the tape. Every tracked leaf
    /// receives a gradient, zero when it did not contribute to `root`.
    ///
    /// A tape supports a single backward pass; a second call is rejected.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.tracked {
            return Err(TensorError::UntrackedRoot);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = node.tracked && matches!(node.op, Op::Leaf);
            if keep {
                if grads[i].is_none() {
                    grads[i] = Some(vec![0.0; node.value.numel()]);
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let x = node.inputs[0];
        let xv = &self.nodes[x.0].value;
        let x_tracked = self.nodes[x.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Tanh => unary_grad(grads, x, x_tracked, xv, |i, _| g[i] * (1.0 - out[i] * out[i])),
            Op::Sigmoid => unary_grad(grads, x, x_tracked, xv, |i, _| g[i] * out[i] * (1.0 - out[i])),
            Op::Exp => unary_grad(grads, x, x_tracked, xv, |i, _| g[i] * out[i]),
            Op::Sin => unary_grad(grads, x, x_tracked, xv, |i, v| g[i] * v.cos()),
            Op::Square => unary_grad(grads, x, x_tracked, xv, |i, v| g[i] * 2.0 * v),
            Op::Recip => unary_grad(grads, x, x_tracked, xv, |i, _| -g[i] * out[i] * out[i]),
            Op::Softplus => unary_grad(grads, x, x_tracked, xv, |i, v| g[i] * sigmoid(v)),
            Op::Scale(f) => unary_grad(grads, x, x_tracked, xv, |i, _| g[i] * f),
            Op::AddScalar | Op::Reshape => unary_grad(grads, x, x_tracked, xv, |i, _| g[i]),
            Op::ClampMin(floor) => {
                unary_grad(grads, x, x_tracked, xv, |i, v| if v > *floor { g[i] } else { 0.0 })
            }
            Op::Prelu => {
                let slope = node.inputs[1];
                let a = self.nodes[slope.0].value.item();
                unary_grad(grads, x, x_tracked, xv, |i, v| if v >= 0.0 { g[i] } else { a * g[i] });
                if self.nodes[slope.0].tracked {
                    let ga: f64 = xv
                        .data()
                        .iter()
                        .zip(g)
                        .filter(|(v, _)| **v < 0.0)
                        .map(|(v, gi)| v * gi)
                        .sum();
                    slot(grads, slope, 1)[0] += ga;
                }
            }
            Op::Add(rule) | Op::Sub(rule) | Op::Mul(rule) => {
                let b = node.inputs[1];
                let bv = &self.nodes[b.0].value;
                let n = xv.dims2().map(|d| d.1).unwrap_or(xv.numel());
                let bidx = |i: usize| match rule {
                    Bcast::Same => i,
                    Bcast::Scalar => 0,
                    Bcast::Row => i % n,
                    Bcast::Col => i / n,
                };
                let (da, db): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) = match &node.op {
                    Op::Add(_) => (Box::new(|i| g[i]), Box::new(|i| g[i])),
                    Op::Sub(_) => (Box::new(|i| g[i]), Box::new(|i| -g[i])),
                    _ => (
                        Box::new(|i| g[i] * bv.data()[bidx(i)]),
                        Box::new(|i| g[i] * xv.data()[i]),
                    ),
                };
                if x_tracked {
                    let s = slot(grads, x, xv.numel());
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += da(i);
                    }
                }
                if self.nodes[b.0].tracked {
                    let s = slot(grads, b, bv.numel());
                    for i in 0..g.len() {
                        s[bidx(i)] += db(i);
                    }
                }
            }
            Op::Broadcast(rule) => {
                if x_tracked {
                    let n = node.value.shape()[1];
                    let s = slot(grads, x, xv.numel());
                    for (i, gi) in g.iter().enumerate() {
                        let j = match rule {
                            Bcast::Same => i,
                            Bcast::Scalar => 0,
                            Bcast::Row => i % n,
                            Bcast::Col => i / n,
                        };
                        s[j] += gi;
                    }
                }
            }
            Op::MatMul => {
                let b = node.inputs[1];
                let bv = &self.nodes[b.0].value;
                let (m, k) = (xv.shape()[0], xv.shape()[1]);
                let n = bv.shape()[1];
                if x_tracked {
                    // dA = dC · Bᵀ
                    let s = slot(grads, x, m * k);
                    gemm(m, n, k, g, (n, 1), bv.data(), (1, n), s, 1.0);
                }
                if self.nodes[b.0].tracked {
                    // dB = Aᵀ · dC
                    let s = slot(grads, b, k * n);
                    gemm(k, m, n, xv.data(), (1, k), g, (n, 1), s, 1.0);
                }
            }
            Op::Sum => unary_grad(grads, x, x_tracked, xv, |_, _| g[0]),
            Op::Mean => {
                let inv = 1.0 / xv.numel() as f64;
                unary_grad(grads, x, x_tracked, xv, |_, _| g[0] * inv)
            }
            Op::RowSums => {
                let n = xv.shape()[1];
                unary_grad(grads, x, x_tracked, xv, |i, _| g[i / n])
            }
            Op::SliceCols { start } => {
                if x_tracked {
                    let n = xv.shape()[1];
                    let w = node.value.shape()[1];
                    let s = slot(grads, x, xv.numel());
                    for (r, row) in g.chunks(w).enumerate() {
                        for (c, gi) in row.iter().enumerate() {
                            s[r * n + start + c] += gi;
                        }
                    }
                }
            }
            Op::Im2Col(geom) => {
                if x_tracked {
                    let s = slot(grads, x, xv.numel());
                    im2col_visit(geom, |src, dst| s[src] += g[dst]);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn unary_grad(
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    tracked: bool,
    xv: &Tensor,
    f: impl Fn(usize, f64) -> f64,
) {
    if !tracked {
        return;
    }
    let s = slot(grads, x, xv.numel());
    for (i, (si, &v)) in s.iter_mut().zip(xv.data()).enumerate() {
        *si += f(i, v);
    }
}

fn bcast_rule(op: &'static str, out: &[usize], src: &[usize]) -> Result<Bcast, TensorError> {
    if out == src {
        return Ok(Bcast::Same);
    }
    if src.iter().product::<usize>() == 1 {
        return Ok(Bcast::Scalar);
    }
    if let [m, n] = out {
        match src {
            [k] | [1, k] if k == n => return Ok(Bcast::Row),
            [k, 1] if k == m => return Ok(Bcast::Col),
            _ => {}
        }
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: out.to_vec(),
        rhs: src.to_vec(),
    })
}

/// Calls `f(src_index, dst_index)` for every non-padding patch entry.
fn im2col_visit(g: &ConvGeom, mut f: impl FnMut(usize, usize)) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plen = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.channels;
                        let dst = row * plen + (ky * g.kernel + kx) * g.channels;
                        for c in 0..g.channels {
                            f(src + c, dst + c);
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for strided row-major views; `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index reachable through the
    // given (row, col) strides, which describe dense m×k, k×n and m×n views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}
