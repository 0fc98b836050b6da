//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order: every node's inputs have smaller ids. [`Graph::backward`]
//! walks the list once in reverse.

use std::rc::Rc;

use crate::error::{EetError, Result};
use crate::tensor::{axis_geometry, gemm, masked_softmax_rows, Operand, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `rows × cols` pattern of entries a masked softmax may use.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(EetError::Shape {
                op: "mask",
                left: vec![rows, cols],
                right: vec![allowed.len()],
            });
        }
        for r in 0..rows {
            if !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(EetError::contract(format!("mask row {r} allows no entry")));
            }
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Column indices allowed in row `r`, ascending.
    pub fn keys(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.allowed(r, c)).collect()
    }
}

/// Operation kinds, used for diagnostics and fault injection in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Mul,
    Scale,
    AddRow,
    LayerNorm,
    Gelu,
    Softmax,
    MaskedSoftmax,
    ConcatCols,
    ConcatRows,
    SliceRows,
    Sum,
    CrossEntropy,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Keeps the forward `tanh` term for the backward pass.
    Gelu(Var, Vec<f64>),
    Softmax(Var, usize),
    MaskedSoftmax(Var, Rc<Mask>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    faulty: Option<OpKind>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_K * x * x * x)).tanh()
}

/// Derivative of GELU at `x` given `t = gelu_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> EetError {
    EetError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of one operation's backward rule. Negative control for
    /// gradient checks only.
    #[doc(hidden)]
    pub fn with_faulty_backward(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            faulty: Some(kind),
        }
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Inputs of `v`, all of which precede it.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Gelu(x, _)
            | Op::Softmax(x, _)
            | Op::MaskedSoftmax(x, _)
            | Op::Sum(x) => {
                vec![*x]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::SliceRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        let value = value.checked(op_name)?;
        let needs_grad = self.inputs_need_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        let check = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => check(a) || check(b),
            Op::Scale(x, _)
            | Op::Gelu(x, _)
            | Op::Softmax(x, _)
            | Op::MaskedSoftmax(x, _)
            | Op::Sum(x) => check(x),
            Op::LayerNorm { x, gamma, beta, .. } => check(x) || check(gamma) || check(beta),
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().any(check),
            Op::SliceRows { x, .. } => check(x),
            Op::CrossEntropy { logits, .. } => check(logits),
        }
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient (an input).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require2("matmul")?;
        let (k2, n) = tb.require2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(ta.data(), m, k),
            Operand::plain(tb.data(), k, n),
            &mut out,
            false,
        );
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            "matmul",
        )
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require2("matmul_nt")?;
        let (n, k2) = tb.require2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(ta.data(), m, k),
            Operand::transposed(tb.data(), k, n),
            &mut out,
            false,
        );
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a, b),
            "matmul_nt",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Adds the row vector `b` (length `n`) to every row of `x: m×n`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = tx.require2("add_row")?;
        if tb.len() != n || tb.dims2().is_none_or(|(r, _)| r != 1) {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (d, bv) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *d += bv;
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::AddRow(x, b),
            "add_row",
        )
    }

    /// Per-row normalization of `x: m×D` followed by the affine `gamma, beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(EetError::contract("layer_norm eps must be positive"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, d) = tx.require2("layer_norm")?;
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push(Tensor::from_parts(vec![m, d], out), op, "layer_norm")
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let tanh: Vec<f64> = input.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = input
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let value = Tensor::from_parts(input.shape().to_vec(), data);
        self.push(value, Op::Gelu(x, tanh), "gelu")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = crate::tensor::softmax(self.value(x), axis)?;
        self.push(value, Op::Softmax(x, axis), "softmax")
    }

    /// Row-wise softmax of `x` over the entries `mask` allows; the rest are 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Mask>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.require2("masked_softmax")?;
        if (r, c) != (mask.rows, mask.cols) {
            return Err(EetError::Shape {
                op: "masked_softmax",
                left: tx.shape().to_vec(),
                right: vec![mask.rows, mask.cols],
            });
        }
        let out = masked_softmax_rows(tx.data(), &mask.allowed, r, c);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::MaskedSoftmax(x, mask),
            "masked_softmax",
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| EetError::contract("concat of nothing"))?;
        let (m, _) = self.value(*first).require2("concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).require2("concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(x)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let t = self.value(x);
            for r in 0..m {
                out[r * n + offset..r * n + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(xs.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| EetError::contract("concat of nothing"))?;
        let (_, n) = self.value(*first).require2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let t = self.value(x);
            let (r, c) = t.require2("concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::ConcatRows(xs.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require2("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(EetError::contract(format!(
                "slice_rows {start}..{} out of 0..{m}",
                start + len
            )));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_parts(vec![len, n], data),
            Op::SliceRows { x, start },
            "slice_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// `−log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let k = t.len();
        if t.dims2().is_none_or(|(r, _)| r != 1) {
            return Err(EetError::contract(format!(
                "cross_entropy expects one row of logits, got {:?}",
                t.shape()
            )));
        }
        if label >= k {
            return Err(EetError::contract(format!(
                "label {label} out of range 0..{k}"
            )));
        }
        let (loss, probs) = log_softmax_nll(t.data(), label);
        let op = Op::CrossEntropy {
            logits,
            label,
            probs,
        };
        self.push(Tensor::scalar(loss), op, "cross_entropy")
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(EetError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let sign = if self.faulty == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            self.propagate(id, &g, sign, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf if n.needs_grad => Some(
                    grads[i]
                        .take()
                        .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adds a product into `v`'s gradient. `write(out, accumulate)` computes
    /// the product into `out`, adding to its contents when `accumulate`.
    fn accumulate_gemm(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        len: usize,
        sign: f64,
        write: impl FnOnce(&mut [f64], bool),
    ) {
        if sign == 1.0 {
            if let Some(existing) = &mut grads[v.0] {
                write(existing, true);
                return;
            }
        }
        let mut out = vec![0.0; len];
        write(&mut out, false);
        if sign != 1.0 {
            out.iter_mut().for_each(|x| *x *= sign);
        }
        self.accumulate(grads, v, out);
    }

    fn propagate(&self, id: usize, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let signed = |mut v: Vec<f64>| {
            if sign != 1.0 {
                v.iter_mut().for_each(|x| *x *= sign);
            }
            v
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let (_, n) = tb.dims2().unwrap();
                if self.needs(*a) {
                    self.accumulate_gemm(grads, *a, m * k, sign, |out, acc| {
                        gemm(
                            Operand::plain(g, m, n),
                            Operand::transposed(tb.data(), n, k),
                            out,
                            acc,
                        )
                    });
                }
                if self.needs(*b) {
                    self.accumulate_gemm(grads, *b, k * n, sign, |out, acc| {
                        gemm(
                            Operand::transposed(ta.data(), k, m),
                            Operand::plain(g, m, n),
                            out,
                            acc,
                        )
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let (n, _) = tb.dims2().unwrap();
                if self.needs(*a) {
                    self.accumulate_gemm(grads, *a, m * k, sign, |out, acc| {
                        gemm(
                            Operand::plain(g, m, n),
                            Operand::plain(tb.data(), n, k),
                            out,
                            acc,
                        )
                    });
                }
                if self.needs(*b) {
                    self.accumulate_gemm(grads, *b, n * k, sign, |out, acc| {
                        gemm(
                            Operand::transposed(g, n, m),
                            Operand::plain(ta.data(), m, k),
                            out,
                            acc,
                        )
                    });
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, signed(g.to_vec()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, signed(g.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, signed(ga));
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, signed(gb));
                }
            }
            Op::Scale(x, c) => {
                let gx = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, signed(gx));
            }
            Op::AddRow(x, b) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                if self.needs(*x) {
                    self.accumulate(grads, *x, signed(g.to_vec()));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, signed(gb));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, d) = self.value(*x).dims2().unwrap();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    self.accumulate(grads, *gamma, signed(gg));
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                    self.accumulate(grads, *beta, signed(gb));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * d];
                    for r in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * gam[c];
                            gx[r * d + c] =
                                inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, signed(gx));
                }
            }
            Op::Gelu(x, tanh) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(tanh)
                    .map(|((gv, &xv), &t)| gv * gelu_grad(xv, t))
                    .collect();
                self.accumulate(grads, *x, signed(gx));
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_geometry(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * len * inner + i * inner + j;
                        let dot: f64 = (0..len).map(|i| y[idx(i)] * g[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, signed(gx));
            }
            Op::MaskedSoftmax(x, mask) => {
                let y = node.value.data();
                let (r, c) = (mask.rows, mask.cols);
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    let span = row * c..(row + 1) * c;
                    let dot: f64 = y[span.clone()]
                        .iter()
                        .zip(&g[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in span {
                        if mask.allowed[i] {
                            gx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, signed(gx));
            }
            Op::ConcatCols(xs) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let (_, w) = self.value(x).dims2().unwrap();
                    if self.needs(x) {
                        let mut gx = vec![0.0; m * w];
                        for r in 0..m {
                            gx[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * n + offset..r * n + offset + w]);
                        }
                        self.accumulate(grads, x, signed(gx));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if self.needs(x) {
                        self.accumulate(grads, x, signed(g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let (_, n) = t.dims2().unwrap();
                let mut gx = vec![0.0; t.len()];
                gx[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, signed(gx));
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                self.accumulate(grads, *x, signed(gx));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gx[*label] -= g[0];
                self.accumulate(grads, *logits, signed(gx));
            }
        }
    }
}

/// Negative log-likelihood of `label` under `softmax(logits)` and the
/// probabilities themselves.
pub(crate) fn log_softmax_nll(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logits.iter().map(|v| (v - lse).exp()).collect();
    ((lse - logits[label]).max(0.0), probs)
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf; zero if the loss does not depend on it.
    pub fn get(&self, v: Var) -> &Tensor {
        self.leaves
            .get(v.0)
            .and_then(Option::as_ref)
            .expect("gradient requested for a node that is not a parameter")
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.leaves[v.0]
            .take()
            .expect("gradient requested for a node that is not a parameter")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2, 3], 0.7));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pv = Tensor::randn(&[4], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = g.param(pv.clone());
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).max_abs_diff(&pv) < 1e-15);
    }

    #[test]
    fn unreached_parameter_gets_zero() {
        let mut g = Graph::new();
        let p = g.param(Tensor::ones(&[2]));
        let q = g.param(Tensor::ones(&[3]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(q), &Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(p), Err(EetError::Contract(_))));
    }

    #[test]
    fn softmax_matmul_composite_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let eval = |av: &Tensor, bv: &Tensor| {
            let mut g = Graph::new();
            let pa = g.param(av.clone());
            let pb = g.param(bv.clone());
            let pw = g.constant(w.clone());
            let m = g.matmul(pa, pb).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let p = g.mul(s, pw).unwrap();
            let l = g.sum(p).unwrap();
            (g, pa, pb, l)
        };
        let (g, pa, pb, l) = eval(&a, &b);
        let grads = g.backward(l).unwrap();
        let num_a = central_diff(
            |x| {
                let (g, _, _, l) = eval(x, &b);
                g.value(l).item()
            },
            &a,
            1e-4,
        );
        let num_b = central_diff(
            |x| {
                let (g, _, _, l) = eval(&a, x);
                g.value(l).item()
            },
            &b,
            1e-4,
        );
        assert!(rel_err(grads.get(pa), &num_a) < 1e-4);
        assert!(rel_err(grads.get(pb), &num_b) < 1e-4);
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let y0 = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let gam0 = Tensor::randn(&[4], 1.0, &mut rng);
        let bet0 = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let probe = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mask =
            Rc::new(Mask::new(4, 5, (0..20).map(|i| i % 3 != 1 || i % 5 == 0).collect()).unwrap());
        let build = |xs: [&Tensor; 4]| {
            let mut g = Graph::new();
            let x = g.param(xs[0].clone());
            let y = g.param(xs[1].clone());
            let gam = g.param(xs[2].clone());
            let bet = g.param(xs[3].clone());
            let ln = g.layer_norm(x, gam, bet, 1e-5).unwrap();
            let act = g.gelu(ln).unwrap();
            let shifted = g.add_row(act, bet).unwrap();
            let cat = g.concat_rows(&[shifted, bet]).unwrap(); // 4×4
            let sc = g.matmul_nt(cat, y).unwrap(); // 4×5
            let sm = g.masked_softmax(sc, mask.clone()).unwrap();
            let sm2 = g.softmax(sc, 0).unwrap();
            let both = g.concat_cols(&[sm, sm2]).unwrap(); // 4×10
            let top = g.slice_rows(both, 1, 3).unwrap(); // 3×10
            let cols = g.concat_cols(&[top, top]).unwrap();
            let sq = g.mul(cols, cols).unwrap();
            let half = g.scale(sq, 0.5).unwrap();
            let pr = g.constant(probe.clone());
            let mm = g.matmul(cat, pr).unwrap(); // 4×5
            let row = g.slice_rows(mm, 0, 1).unwrap();
            let ce = g.cross_entropy(row, 2).unwrap();
            let s1 = g.sum(half).unwrap();
            let total = g.add(s1, ce).unwrap();
            (g, [x, y, gam, bet], total)
        };
        let inputs = [&x0, &y0, &gam0, &bet0];
        let (g, vars, loss) = build(inputs);
        let grads = g.backward(loss).unwrap();
        for k in 0..4 {
            let num = central_diff(
                |t| {
                    let mut ins = inputs;
                    ins[k] = t;
                    let (g, _, l) = build(ins);
                    g.value(l).item()
                },
                inputs[k],
                1e-5,
            );
            let err = rel_err(grads.get(vars[k]), &num);
            assert!(err < 1e-6, "input {k}: rel err {err}");
        }
    }

    #[test]
    fn layer_norm_constant_token_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let gam = g.constant(Tensor::ones(&[4]));
        let bet = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gam, bet, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let gam = g.constant(Tensor::ones(&[3]));
        let bet = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gam, bet, 1e-12).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let mut g = Graph::new();
        let l = g.param(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
        let ce = g.cross_entropy(l, 1).unwrap();
        let grads = g.backward(ce).unwrap();
        let p = crate::tensor::softmax(&Tensor::new(vec![4], logits.to_vec()).unwrap(), 0).unwrap();
        for i in 0..4 {
            let want = p.data()[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((grads.get(l).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn faulty_rule_changes_gradient() {
        let mut g = Graph::with_faulty_backward(OpKind::Gelu);
        let x = g.param(Tensor::full(&[1, 2], 0.5));
        let y = g.gelu(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).data()[0] < 0.0);
    }

    #[test]
    fn ops_reject_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(EetError::Shape { .. })));
        assert!(matches!(g.add(a, b), Err(EetError::Shape { .. })));
        assert!(matches!(g.cross_entropy(a, 0), Err(EetError::Contract(_))));
    }

    #[test]
    fn topological_order_holds() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2, 2]));
        let b = g.matmul(a, a).unwrap();
        let c = g.gelu(b).unwrap();
        for v in [b, c] {
            assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
        }
    }
}
