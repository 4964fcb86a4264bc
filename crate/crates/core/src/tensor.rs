//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! Values live on a [`Tape`]; operations append nodes and return [`Var`]
//! handles, so the node list is topologically ordered by construction.
//! Broadcasting is limited to trailing-axis parameters (`add_trailing`,
//! `mul_trailing`, `film`, `layer_norm`); everything else requires equal
//! shapes or an explicit reshape.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
    MeanRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddTrailing(a, b)
            | Op::MulTrailing(a, b)
            | Op::MseLoss(a, b) => vec![*a, *b],
            Op::AddScalar(x)
            | Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x) => vec![*x],
            Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Film { x, scale, shift } => vec![*x, *scale, *shift],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major `[m,k] x [k,n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Registers a leaf; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a borrowed leaf without copying it; trainable iff
    /// `t.requires_grad()`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} (element {bad} = {})",
                data[bad]
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(Tensor {
                shape,
                data,
                requires_grad,
            }),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension {
                op,
                detail: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn trailing(&self, op: &'static str, x: Var, p: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.value(p).numel() != d || self.shape(p).len() > 1 {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(p).to_vec(),
            });
        }
        Ok(d)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., d] + b[d]`
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.trailing("add_trailing", x, b)?;
        let bias = &self.value(b).data;
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_trailing", shape, data, Op::AddTrailing(x, b))
    }

    /// `x[..., d] * g[d]`
    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Result<Var> {
        let d = self.trailing("mul_trailing", x, g)?;
        let gain = &self.value(g).data;
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * gain[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_trailing", shape, data, Op::MulTrailing(x, g))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data.iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Scale(x, c))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", x)?;
        let data = transpose_raw(&self.value(x).data, r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).data.clone();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, data, Op::Gelu(x))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                detail: "empty last axis".into(),
            });
        }
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, data, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(x).shape.is_empty() {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: "normalized axis is empty".into(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        self.trailing("layer_norm", x, gain)?;
        self.trailing("layer_norm", x, bias)?;
        let xs = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Feature-wise modulation `x * (1 + scale) + shift` over the last axis.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let d = self.trailing("film", x, scale)?;
        self.trailing("film", x, shift)?;
        let s = &self.value(scale).data;
        let b = &self.value(shift).data;
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + s[i % d]) + b[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("film", shape, data, Op::Film { x, scale, shift })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Vec::new(), vec![m], Op::Mean(x))
    }

    /// Mean of squared differences, reduced to a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let p = &self.value(pred).data;
        let t = &self.value(target).data;
        let m = p
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        self.push("mse_loss", Vec::new(), vec![m], Op::MseLoss(pred, target))
    }

    /// `[r, c] -> [c]`, averaging over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("mean_rows", x)?;
        let xs = &self.value(x).data;
        let mut out = vec![0.0; c];
        for row in xs.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        self.push("mean_rows", vec![c], out, Op::MeanRows(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let xs = &self.value(x).data;
        let mut out = Vec::with_capacity(r * len);
        for row in xs.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push("slice_cols", vec![r, len], out, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let out = self.value(x).data[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", vec![len, c], out, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Dimension {
            op: "concat_cols",
            detail: "nothing to concatenate".into(),
        })?;
        let (r, _) = self.rank2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.rank2("concat_cols", p)?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![r, total], out, Op::ConcatCols(parts.to_vec()))
    }

    /// Reverse pass from a scalar loss. Every trainable leaf on the tape gets
    /// an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(
                    Var(idx),
                    Tensor {
                        shape: node.value.shape.clone(),
                        data,
                        requires_grad: false,
                    },
                );
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                if wants(*a) {
                    let bt = transpose_raw(&val(*b).data, k, n);
                    accumulate(&mut grads[a.0], matmul_raw(gy, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose_raw(&val(*a).data, m, k);
                    accumulate(&mut grads[b.0], matmul_raw(&at, gy, k, m, n));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let g = gy.iter().zip(&val(*b).data).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let g = gy.iter().zip(&val(*a).data).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddTrailing(x, b) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], gy.to_vec());
                }
                if wants(*b) {
                    let d = val(*b).numel();
                    let mut gb = vec![0.0; d];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % d] += g;
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MulTrailing(x, w) => {
                let d = val(*w).numel();
                if wants(*x) {
                    let wd = &val(*w).data;
                    let g = gy.iter().enumerate().map(|(i, g)| g * wd[i % d]).collect();
                    accumulate(&mut grads[x.0], g);
                }
                if wants(*w) {
                    let xd = &val(*x).data;
                    let mut gw = vec![0.0; d];
                    for (i, g) in gy.iter().enumerate() {
                        gw[i % d] += g * xd[i];
                    }
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], gy.to_vec());
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], gy.iter().map(|g| g * c).collect());
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                    accumulate(&mut grads[x.0], transpose_raw(gy, c, r));
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], gy.to_vec());
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let g = gy
                        .iter()
                        .zip(&val(*x).data)
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = &node.value.data;
                    let n = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let g = &val(*gain).data;
                if wants(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rstd.len() {
                        let range = r * d..(r + 1) * d;
                        let gyr = &gy[range.clone()];
                        let xr = &xhat[range.clone()];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gyr[j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[j];
                        }
                        let scale = rstd[r] / d as f64;
                        for j in 0..d {
                            let dxh = gyr[j] * g[j];
                            gx[r * d + j] =
                                scale * (d as f64 * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (i, gv) in gy.iter().enumerate() {
                        gg[i % d] += gv * xhat[i];
                    }
                    accumulate(&mut grads[gain.0], gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for (i, gv) in gy.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::Film { x, scale, shift } => {
                let d = val(*scale).numel();
                if wants(*x) {
                    let s = &val(*scale).data;
                    let g = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * (1.0 + s[i % d]))
                        .collect();
                    accumulate(&mut grads[x.0], g);
                }
                if wants(*scale) {
                    let xd = &val(*x).data;
                    let mut gs = vec![0.0; d];
                    for (i, g) in gy.iter().enumerate() {
                        gs[i % d] += g * xd[i];
                    }
                    accumulate(&mut grads[scale.0], gs);
                }
                if wants(*shift) {
                    let mut gb = vec![0.0; d];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % d] += g;
                    }
                    accumulate(&mut grads[shift.0], gb);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], vec![gy[0]; val(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).numel();
                    accumulate(&mut grads[x.0], vec![gy[0] / n as f64; n]);
                }
            }
            Op::MseLoss(p, t) => {
                let pd = &val(*p).data;
                let td = &val(*t).data;
                let k = 2.0 * gy[0] / pd.len() as f64;
                if wants(*p) {
                    let g = pd.iter().zip(td).map(|(a, b)| k * (a - b)).collect();
                    accumulate(&mut grads[p.0], g);
                }
                if wants(*t) {
                    let g = pd.iter().zip(td).map(|(a, b)| -k * (a - b)).collect();
                    accumulate(&mut grads[t.0], g);
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let r = val(*x).shape[0];
                    let mut g = Vec::with_capacity(val(*x).numel());
                    for _ in 0..r {
                        g.extend(gy.iter().map(|v| v / r as f64));
                    }
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                    let len = node.value.shape[1];
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        g[i * c + start..i * c + start + len]
                            .copy_from_slice(&gy[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = val(*x).shape[1];
                    let mut g = vec![0.0; val(*x).numel()];
                    g[start * c..start * c + gy.len()].copy_from_slice(gy);
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape[0];
                let total = node.value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape[1];
                    if wants(*p) {
                        let mut g = Vec::with_capacity(r * w);
                        for i in 0..r {
                            g.extend_from_slice(&gy[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], g);
                    }
                    offset += w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(m(2, 2, &[1., 0., 0., 1.]));
        let b = tape.constant(m(2, 2, &[3., 4., 5., 6.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

        let a = tape.constant(m(1, 2, &[1., 2.]));
        let b = tape.constant(m(2, 1, &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn layer_norm_constant_and_normalized_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![5.; 4]));
        let g = tape.constant(Tensor::vector(vec![1.; 4]));
        let b = tape.constant(Tensor::vector(vec![0.; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.; 4]);

        let x = tape.constant(Tensor::vector(vec![1., -1.]));
        let g = tape.constant(Tensor::vector(vec![1.; 2]));
        let b = tape.constant(Tensor::vector(vec![0.; 2]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        for (got, want) in tape.value(y).data().iter().zip([1., -1.]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1., 2.]));
        let g = tape.constant(Tensor::vector(vec![1.; 2]));
        let b = tape.constant(Tensor::vector(vec![0.; 2]));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0., 0., 0.]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000., 0.]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn mse_hand_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1., 1.]));
        let t = tape.constant(Tensor::vector(vec![0., 0.]));
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let bad = tape.constant(Tensor::vector(vec![0.; 3]));
        assert!(tape.mse_loss(p, bad).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2., 3.]).with_grad());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]).with_grad());
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]).with_grad());
        let unused = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.; 4]);
        assert_eq!(g.get(unused).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::MAX, 1.0]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]).with_grad());
        let b = tape.leaf(Tensor::zeros(&[3, 2]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c).unwrap();
        let e = tape.sum(d).unwrap();
        for i in 0..tape.len() {
            for inp in tape.inputs_of(Var(i)) {
                assert!(inp.index() < i);
            }
        }
        assert!(e.index() == tape.len() - 1);
    }

    #[test]
    fn film_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![1.; 4]).unwrap());
        let s = tape.constant(Tensor::vector(vec![1.; 4]));
        let b = tape.constant(Tensor::vector(vec![2.; 4]));
        let y = tape.film(x, s, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.; 4]);
    }
}
