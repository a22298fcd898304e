//! Dense tensors with reverse-mode differentiation over a recorded tape.
//!
//! Every value is a row-major matrix; rank-0 and rank-1 shapes are viewed as
//! a single row. A [`Tape`] borrows a [`ParamSet`] so parameter leaves are
//! never copied, and [`Tape::backward`] returns [`Gradients`] that the caller
//! folds into the parameter set. Keeping gradients out of the tape lets
//! several tapes (batch shards) run concurrently against the same
//! parameters and be merged in a fixed order afterwards.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttribute { op: &'static str, detail: String },
    #[error("{op}: index {index} out of bounds for {bound} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("softmax row {row} has no unmasked position")]
    FullyMasked { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("forward pass is stochastic (dropout active); gradient check needs a deterministic forward")]
    Stochastic,
    #[error("values length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) view of a shape: the last axis is columns, everything else
/// is folded into rows.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [lead @ .., c] => (numel(lead), *c),
    }
}

/// Dense array with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(TensorError::BadLength {
                shape,
                len: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Takes the accumulated gradient, leaving `None`.
    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` elementwise into the gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar elements over all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.values.copy_from_slice(&src.values);
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Elementwise sum with `other`.
    pub fn merge(&mut self, other: Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(other.slots) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    /// Adds every gradient into the matching parameter's `grad` field.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for (i, slot) in self.slots.iter().enumerate() {
            if let Some(g) = slot {
                let t = params.get_mut(ParamId(i));
                if t.requires_grad {
                    t.accumulate_grad(g);
                }
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type RowMask = Arc<Vec<bool>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    InterleaveSteps(Vec<Var>),
    SelectRows(RowMask, Var, Var),
    MaskRows(Var, RowMask),
    MulConst(Var, Vec<f64>),
    SeqWeightedSum(Var, Var),
    Reshape(Var),
    Sum(Var),
    WeightedNll {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        normalizer: f64,
    },
}

#[derive(Debug)]
enum Storage {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    storage: Storage,
    op: Op,
    needs_grad: bool,
}

/// Floor applied inside the logarithm of the weighted NLL.
pub const PROB_FLOOR: f64 = 1e-12;

/// Ordered record of executed primitives. Nodes only reference earlier
/// nodes, so index order is a topological order.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
    consumed: bool,
    stochastic: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

// ---- kernels ---------------------------------------------------------------

/// out[m,n] = a[m,k] · b[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    });
    debug_assert_eq!(out.len(), m * n);
    out
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    debug_assert_eq!(out.len(), m * n);
    out
}

/// out[p,q] = a[m,p]ᵀ · b[m,q]
fn mm_tn(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    par::for_each_row(&mut out, q, |r, row| {
        for i in 0..m {
            let av = a[i * p + r];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * q..(i + 1) * q];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    });
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64], row: usize) -> Result<()> {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if valid(j) {
            if !v.is_finite() {
                return Err(TensorError::NonFinite(format!("softmax row {row}")));
            }
            any = true;
            max = max.max(v);
        }
    }
    if !any {
        return Err(TensorError::FullyMasked { row });
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if valid(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            consumed: false,
            stochastic: false,
        }
    }

    /// A tape with no parameter set; only constants can be leaves.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            consumed: false,
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any dropout with rate > 0 has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].storage {
            Storage::Owned(x) => x,
            Storage::Param(id) => self.params.expect("param tape").get(*id).values(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.len(), 1, "not a scalar");
        x[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(self.shape(v))
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(values),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // ---- leaves -------------------------------------------------------------

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, Op::Leaf, false))
    }

    /// Records a leaf that reads parameter `id` without copying it.
    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.expect("tape has no parameter set").get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            storage: Storage::Param(id),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- primitives ---------------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = mm_nn(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout used for weight matrices stored
    /// output-major.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = mm_nt(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), ng))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax over positions where `mask` is true; masked
    /// positions get exactly zero. `mask` has one entry per element.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(TensorError::InvalidAttribute {
                op: "masked_softmax",
                detail: format!("mask length {} for {} elements", mask.len(), self.value(x).len()),
            });
        }
        self.softmax_impl(x, Some(Arc::new(mask)))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<RowMask>) -> Result<Var> {
        let (rows, n) = self.dims(x);
        let mut out = vec![0.0; rows * n];
        let xs = self.value(x);
        for r in 0..rows {
            let m = mask.as_ref().map(|m| &m[r * n..(r + 1) * n]);
            softmax_row(&xs[r * n..(r + 1) * n], m, &mut out[r * n..(r + 1) * n], r)?;
        }
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), ng))
    }

    /// Concatenates along columns; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidAttribute {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if start >= end || end > n {
            return Err(TensorError::InvalidAttribute {
                op: "slice_cols",
                detail: format!("range {start}..{end} for {n} columns"),
            });
        }
        let w = end - start;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * n + start..r * n + end]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, w], out, Op::SliceCols(x, start), ng))
    }

    /// Row gather: output row i is row `indices[i]` of `x`. Embedding
    /// lookup is a gather on the embedding matrix.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in &indices {
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![indices.len(), n], out, Op::GatherRows(x, Arc::new(indices)), ng))
    }

    /// Stacks `L` per-step `[B, D]` matrices into `[B·L, D]` with row
    /// `b·L + t` holding step `t` of sequence `b`.
    pub fn interleave_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(TensorError::InvalidAttribute {
                op: "interleave_steps",
                detail: "no steps".into(),
            });
        };
        let (b, d) = self.dims(first);
        for &s in steps {
            if self.dims(s) != (b, d) {
                return Err(self.mismatch("interleave_steps", first, s));
            }
        }
        let l = steps.len();
        let mut out = vec![0.0; b * l * d];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            for row in 0..b {
                let dst = (row * l + t) * d;
                out[dst..dst + d].copy_from_slice(&v[row * d..(row + 1) * d]);
            }
        }
        let ng = steps.iter().any(|&s| self.needs(s));
        Ok(self.push(vec![b * l, d], out, Op::InterleaveSteps(steps.to_vec()), ng))
    }

    /// Row-wise select: row r comes from `a` where `mask[r]`, else from `b`.
    pub fn select_rows(&mut self, mask: Arc<Vec<bool>>, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("select_rows", a, b));
        }
        let (rows, n) = self.dims(a);
        if mask.len() != rows {
            return Err(TensorError::InvalidAttribute {
                op: "select_rows",
                detail: format!("mask length {} for {rows} rows", mask.len()),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * n);
        for (r, &keep) in mask.iter().enumerate() {
            let src = if keep { av } else { bv };
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SelectRows(mask, a, b), ng))
    }

    /// Zeroes rows where `mask` is false.
    pub fn mask_rows(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if mask.len() != rows {
            return Err(TensorError::InvalidAttribute {
                op: "mask_rows",
                detail: format!("mask length {} for {rows} rows", mask.len()),
            });
        }
        let xs = self.value(x);
        let mut out = vec![0.0; rows * n];
        for (r, &keep) in mask.iter().enumerate() {
            if keep {
                out[r * n..(r + 1) * n].copy_from_slice(&xs[r * n..(r + 1) * n]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskRows(x, mask), ng))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(TensorError::InvalidAttribute {
                op: "mul_const",
                detail: format!("{} factors for {} elements", factors.len(), self.value(x).len()),
            });
        }
        let out = self.value(x).iter().zip(&factors).map(|(a, b)| a * b).collect();
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst(x, factors), ng))
    }

    /// Inverted dropout: each element is kept with probability
    /// `keep_prob` and scaled by `1/keep_prob`. `keep_prob == 1` is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: f64, rng: &mut R) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::InvalidAttribute {
                op: "dropout",
                detail: format!("keep probability {keep_prob} outside (0, 1]"),
            });
        }
        if keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / keep_prob;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep_prob { scale } else { 0.0 })
            .collect();
        self.stochastic = true;
        self.mul_const(x, mask)
    }

    /// Attention pooling: `alpha[B, L]`, `h[B·L, D]` → `out[b] = Σ_t alpha[b,t] h[b·L+t]`.
    pub fn seq_weighted_sum(&mut self, alpha: Var, h: Var) -> Result<Var> {
        let (b, l) = self.dims(alpha);
        let (rows, d) = self.dims(h);
        if rows != b * l {
            return Err(self.mismatch("seq_weighted_sum", alpha, h));
        }
        let (a, hv) = (self.value(alpha), self.value(h));
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let dst = &mut out[bi * d..(bi + 1) * d];
            for t in 0..l {
                let w = a[bi * l + t];
                let src = &hv[(bi * l + t) * d..(bi * l + t + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, &x)| *o += w * x);
            }
        }
        let ng = self.needs(alpha) || self.needs(h);
        Ok(self.push(vec![b, d], out, Op::SeqWeightedSum(alpha, h), ng))
    }

    /// Same values, new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(TensorError::InvalidAttribute {
                op: "reshape",
                detail: format!("{:?} → {:?}", self.shape(x), shape),
            });
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    /// `Σ_i w_i · −ln(max(p[i, y_i], PROB_FLOOR)) / normalizer` over the
    /// rows of a probability matrix.
    pub fn weighted_nll(
        &mut self,
        probs: Var,
        labels: &[usize],
        weights: &[f64],
        normalizer: f64,
    ) -> Result<Var> {
        let (rows, classes) = self.dims(probs);
        if labels.len() != rows || weights.len() != rows {
            return Err(TensorError::InvalidAttribute {
                op: "weighted_nll",
                detail: format!("{} labels / {} weights for {rows} rows", labels.len(), weights.len()),
            });
        }
        if normalizer.is_nan() || normalizer <= 0.0 {
            return Err(TensorError::InvalidAttribute {
                op: "weighted_nll",
                detail: format!("normalizer {normalizer} must be positive"),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(TensorError::IndexOutOfBounds {
                op: "weighted_nll",
                index: bad,
                bound: classes,
            });
        }
        let p = self.value(probs);
        let total: f64 = labels
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&y, &w))| -w * p[i * classes + y].max(PROB_FLOOR).ln())
            .sum();
        let ng = self.needs(probs);
        Ok(self.push(
            vec![],
            vec![total / normalizer],
            Op::WeightedNll {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                normalizer,
            },
            ng,
        ))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Propagates d(loss)/d(node) back to every parameter leaf and clears
    /// the tape. A second call without a new forward is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nparams = self.params.map_or(0, ParamSet::len);
        let mut param_grads = Gradients {
            slots: vec![None; nparams],
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Storage::Param(id) = node.storage {
                add_into(&mut param_grads.slots[id.0], &g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(param_grads)
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if self.nodes[v.0].needs_grad {
            add_into(&mut grads[v.0], contribution);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = match &node.storage {
            Storage::Owned(v) => v.as_slice(),
            Storage::Param(_) => unreachable!(),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    self.send(grads, *a, &mm_nt(g, self.value(*b), m, n, k));
                }
                if self.needs(*b) {
                    self.send(grads, *b, &mm_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.needs(*a) {
                    self.send(grads, *a, &mm_nn(g, self.value(*b), m, n, k));
                }
                if self.needs(*b) {
                    self.send(grads, *b, &mm_tn(g, self.value(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g);
                self.send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.send(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    self.send(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    self.send(grads, *b, &gb);
                }
            }
            Op::AddRow(x, bias) => {
                self.send(grads, *x, g);
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.send(grads, *bias, &gb);
                }
            }
            Op::Scale(x, f) => {
                let gx: Vec<f64> = g.iter().map(|v| v * f).collect();
                self.send(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.send(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.send(grads, *x, &gx);
            }
            Op::Softmax(x) => {
                let n = self.dims(*x).1;
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gy - dot);
                    }
                }
                self.send(grads, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.send(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, n) = self.dims(*x);
                let w = node.shape[1];
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.send(grads, *x, &gx);
            }
            Op::GatherRows(x, indices) => {
                if self.needs(*x) {
                    // scatter-add straight into the source buffer; a gather
                    // of a few rows must not cost a full-size temporary
                    let (rows, n) = self.dims(*x);
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; rows * n]);
                    for (k, &src) in indices.iter().enumerate() {
                        gx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g[k * n..(k + 1) * n])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::InterleaveSteps(steps) => {
                let l = steps.len();
                let (b, d) = self.dims(steps[0]);
                for (t, &s) in steps.iter().enumerate() {
                    if !self.needs(s) {
                        continue;
                    }
                    let mut gs = Vec::with_capacity(b * d);
                    for row in 0..b {
                        let src = (row * l + t) * d;
                        gs.extend_from_slice(&g[src..src + d]);
                    }
                    self.send(grads, s, &gs);
                }
            }
            Op::SelectRows(mask, a, b) => {
                let n = self.dims(*a).1;
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (r, &keep) in mask.iter().enumerate() {
                    let dst = if keep { &mut ga } else { &mut gb };
                    dst[r * n..(r + 1) * n].copy_from_slice(&g[r * n..(r + 1) * n]);
                }
                self.send(grads, *a, &ga);
                self.send(grads, *b, &gb);
            }
            Op::MaskRows(x, mask) => {
                let n = self.dims(*x).1;
                let mut gx = g.to_vec();
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        gx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                self.send(grads, *x, &gx);
            }
            Op::MulConst(x, factors) => {
                let gx: Vec<f64> = g.iter().zip(factors).map(|(a, b)| a * b).collect();
                self.send(grads, *x, &gx);
            }
            Op::SeqWeightedSum(alpha, h) => {
                let (b, l) = self.dims(*alpha);
                let d = self.dims(*h).1;
                let (a, hv) = (self.value(*alpha), self.value(*h));
                if self.needs(*alpha) {
                    let mut ga = vec![0.0; b * l];
                    for bi in 0..b {
                        let gs = &g[bi * d..(bi + 1) * d];
                        for t in 0..l {
                            let hr = &hv[(bi * l + t) * d..(bi * l + t + 1) * d];
                            ga[bi * l + t] = gs.iter().zip(hr).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.send(grads, *alpha, &ga);
                }
                if self.needs(*h) {
                    let mut gh = vec![0.0; b * l * d];
                    for bi in 0..b {
                        let gs = &g[bi * d..(bi + 1) * d];
                        for t in 0..l {
                            let w = a[bi * l + t];
                            let dst = &mut gh[(bi * l + t) * d..(bi * l + t + 1) * d];
                            dst.iter_mut().zip(gs).for_each(|(o, &x)| *o = w * x);
                        }
                    }
                    self.send(grads, *h, &gh);
                }
            }
            Op::Reshape(x) => self.send(grads, *x, g),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, &vec![g[0]; n]);
            }
            Op::WeightedNll {
                probs,
                labels,
                weights,
                normalizer,
            } => {
                let classes = self.dims(*probs).1;
                let p = self.value(*probs);
                let mut gp = vec![0.0; p.len()];
                for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    let pv = p[r * classes + y];
                    if pv > PROB_FLOOR {
                        gp[r * classes + y] = -g[0] * w / (normalizer * pv);
                    }
                }
                self.send(grads, *probs, &gp);
            }
        }
    }
}

/// Maximum relative error between analytic and central-difference
/// gradients over every element of every trainable parameter:
/// `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `forward` must build a scalar loss on the given tape deterministically.
pub fn grad_check<F>(params: &mut ParamSet, epsilon: f64, forward: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        if tape.is_stochastic() {
            return Err(TensorError::Stochastic);
        }
        tape.backward(loss)?
    };
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        let id = ParamId(p);
        if !params.get(id).requires_grad() {
            continue;
        }
        for e in 0..params.get(id).len() {
            let orig = params.get(id).values()[e];
            params.get_mut(id).values_mut()[e] = orig + epsilon;
            let plus = eval(params);
            params.get_mut(id).values_mut()[e] = orig - epsilon;
            let minus = eval(params);
            params.get_mut(id).values_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g[e]);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of {}", params.name(id))));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::BadLength { .. })
        ));
    }

    #[test]
    fn ones_matmul() {
        let mut tape = Tape::detached();
        let a = tape.constant(&t(&[2, 3], &[1.0; 6]));
        let b = tape.constant(&t(&[3, 1], &[1.0; 3]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::detached();
        let a = tape.constant(&t(&[2, 3], &[1.0; 6]));
        let b = tape.constant(&t(&[2, 1], &[1.0; 2]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::detached();
        let x = tape.constant(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_rejects_empty_rows() {
        let mut tape = Tape::detached();
        let x = tape.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]));
        let y = tape.masked_softmax(x, vec![true, false, true, true, true, false]).unwrap();
        let v = tape.value(y);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(v[3], 0.5);
        let r = tape.masked_softmax(x, vec![true, true, true, false, false, false]);
        assert_eq!(r.unwrap_err(), TensorError::FullyMasked { row: 1 });
    }

    #[test]
    fn softmax_rejects_nan_but_ignores_it_when_masked() {
        let mut tape = Tape::detached();
        let x = tape.constant(&t(&[1, 3], &[1.0, f64::NAN, 2.0]));
        assert!(matches!(tape.softmax(x), Err(TensorError::NonFinite(_))));
        let y = tape.masked_softmax(x, vec![true, false, true]).unwrap();
        assert_eq!(tape.value(y)[1], 0.0);
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut ps = ParamSet::new();
        let id = ps.push("x", t(&[1], &[0.0]).with_grad());
        let mut tape = Tape::new(&ps);
        let x = tape.param(id);
        let y = tape.tanh(x);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap(), &[1.0]);
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W x); dL/dW[i][j] = x[j] for every row i
        let mut ps = ParamSet::new();
        let w = ps.push("w", t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).with_grad());
        let mut tape = Tape::new(&ps);
        let wv = tape.param(w);
        let x = tape.constant(&t(&[3, 1], &[2.0, -1.0, 0.5]));
        let y = tape.matmul(wv, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, -1.0, 0.5, 2.0, -1.0, 0.5]);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut ps = ParamSet::new();
        let a = ps.push("a", t(&[1], &[2.0]).with_grad());
        let p = ps.push("p", t(&[1], &[3.0]).with_grad());
        let mut tape = Tape::new(&ps);
        let av = tape.param(a);
        let _pv = tape.param(p);
        let l = tape.sum(av);
        let g = tape.backward(l).unwrap();
        g.accumulate_into(&mut ps);
        assert!(g.get(p).is_none());
        assert_eq!(ps.get(p).grad(), None);
        assert_eq!(ps.get(a).grad(), Some(&[1.0][..]));
    }

    #[test]
    fn backward_errors() {
        let mut ps = ParamSet::new();
        let a = ps.push("a", t(&[2], &[1.0, 2.0]).with_grad());
        let mut tape = Tape::new(&ps);
        let v = tape.param(a);
        assert!(matches!(tape.backward(v), Err(TensorError::NonScalarLoss(_))));
        let l = tape.sum(v);
        tape.backward(l).unwrap();
        assert_eq!(tape.backward(l).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn two_backward_passes_accumulate() {
        let mut ps = ParamSet::new();
        let a = ps.push("a", t(&[1], &[1.5]).with_grad());
        for factor in [2.0, 3.0] {
            let g = {
                let mut tape = Tape::new(&ps);
                let v = tape.param(a);
                let s = tape.scale(v, factor);
                let l = tape.sum(s);
                tape.backward(l).unwrap()
            };
            g.accumulate_into(&mut ps);
        }
        assert_eq!(ps.get(a).grad(), Some(&[5.0][..]));
    }

    #[test]
    fn dropout_rejects_bad_keep_probability() {
        let mut tape = Tape::detached();
        let x = tape.constant(&t(&[2], &[1.0, 1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                tape.dropout(x, bad, &mut rng),
                Err(TensorError::InvalidAttribute { op: "dropout", .. })
            ));
        }
        assert_eq!(tape.dropout(x, 1.0, &mut rng).unwrap(), x);
        assert!(!tape.is_stochastic());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut tape = Tape::detached();
        let n = 100_000;
        let x = tape.constant(&t(&[n], &vec![1.0; n]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, 0.7, &mut rng).unwrap();
        let mean = tape.value(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(tape.is_stochastic());
    }

    #[test]
    fn gather_out_of_bounds() {
        let mut tape = Tape::detached();
        let x = tape.constant(&t(&[2, 2], &[1.0; 4]));
        assert!(matches!(
            tape.gather_rows(x, vec![0, 2]),
            Err(TensorError::IndexOutOfBounds { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn linear_model_grad_check_is_exact() {
        let mut ps = ParamSet::new();
        let w = ps.push("w", t(&[1], &[0.7]).with_grad());
        let b = ps.push("b", t(&[1], &[-0.3]).with_grad());
        let err = grad_check(&mut ps, 1e-5, |tape| {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let x = tape.constant(&t(&[1], &[2.5]));
            let wx = tape.mul(wv, x)?;
            let y = tape.add(wx, bv)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_rejects_dropout() {
        let mut ps = ParamSet::new();
        let w = ps.push("w", t(&[4], &[0.1, 0.2, 0.3, 0.4]).with_grad());
        let r = grad_check(&mut ps, 1e-5, |tape| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let v = tape.param(w);
            let d = tape.dropout(v, 0.7, &mut rng)?;
            Ok(tape.sum(d))
        });
        assert_eq!(r.unwrap_err(), TensorError::Stochastic);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).with_grad()
        };
        let mut ps = ParamSet::new();
        let a = ps.push("a", rand_t(&[3, 4]));
        let b = ps.push("b", rand_t(&[2, 4]));
        let bias = ps.push("bias", rand_t(&[2]));
        let e = ps.push("e", rand_t(&[5, 3]));
        let err = grad_check(&mut ps, 1e-5, |tape| {
            let ev = tape.param(e);
            let x = tape.gather_rows(ev, vec![4, 0, 2, 2, 1, 3])?; // [6,3]
            let av = tape.param(a);
            let h = tape.matmul(x, av)?; // [6,4]
            let h = tape.tanh(h);
            let s1 = tape.slice_cols(h, 0, 2)?;
            let s2 = tape.slice_cols(h, 2, 4)?;
            let sg = tape.sigmoid(s2);
            let m = tape.mul(s1, sg)?;
            let d = tape.sub(m, s1)?;
            let c = tape.concat_cols(&[d, s1])?; // [6,4]
            let bv = tape.param(b);
            let logits = tape.matmul_nt(c, bv)?; // [6,2]
            let bb = tape.param(bias);
            let logits = tape.add_row(logits, bb)?;
            let scores = tape.slice_cols(logits, 0, 1)?;
            let scores = tape.reshape(scores, vec![2, 3])?;
            let alpha = tape.masked_softmax(scores, vec![true, true, false, true, true, true])?;
            let pooled = tape.seq_weighted_sum(alpha, c)?; // [2,4]
            let pr = tape.matmul_nt(pooled, bv)?;
            let p = tape.softmax(pr)?;
            tape.weighted_nll(p, &[0, 1], &[2.0, 0.5], 2.5)
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn steps_select_and_mask_have_correct_gradients() {
        let mut ps = ParamSet::new();
        let a = ps.push("a", t(&[2, 3], &[0.3, -0.1, 0.8, 0.5, 0.2, -0.7]).with_grad());
        let b = ps.push("b", t(&[2, 3], &[-0.4, 0.9, 0.1, 0.6, -0.5, 0.25]).with_grad());
        let err = grad_check(&mut ps, 1e-5, |tape| {
            let av = tape.param(a);
            let bv = tape.param(b);
            let sel = tape.select_rows(Arc::new(vec![true, false]), av, bv)?;
            let msk = tape.mask_rows(bv, Arc::new(vec![false, true]))?;
            let st = tape.interleave_steps(&[sel, msk, av])?; // [6,3]
            let sq = tape.mul(st, st)?;
            let w = tape.mul_const(sq, vec![1.0, 2.0, 3.0, 0.5, 0.25, 4.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 0.0, 1.0, 1.5, 1.0, 3.0, 1.0])?;
            Ok(tape.sum(w))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn weighted_nll_hand_value() {
        // p[y] = 0.5 (neg, w=2) and 0.25 (pos, w=1) → (2 ln 2 + ln 4)/3 = 4 ln2 / 3
        let mut tape = Tape::detached();
        let p = tape.constant(&t(&[2, 2], &[0.5, 0.5, 0.75, 0.25]));
        let l = tape.weighted_nll(p, &[0, 1], &[2.0, 1.0], 3.0).unwrap();
        assert!((tape.scalar(l) - 4.0 * 2f64.ln() / 3.0).abs() < 1e-15);
        assert!((tape.scalar(l) - 0.924196).abs() < 1e-6);
    }

    #[test]
    fn weighted_nll_floors_zero_probability() {
        let mut tape = Tape::detached();
        let p = tape.constant(&t(&[1, 2], &[0.0, 1.0]));
        let l = tape.weighted_nll(p, &[0], &[1.0], 1.0).unwrap();
        assert!((tape.scalar(l) + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_merge_adds() {
        let mut g1 = Gradients {
            slots: vec![Some(vec![1.0, 2.0]), None],
        };
        let g2 = Gradients {
            slots: vec![Some(vec![0.5, 0.5]), Some(vec![3.0])],
        };
        g1.merge(g2);
        assert_eq!(g1.get(ParamId(0)).unwrap(), &[1.5, 2.5]);
        assert_eq!(g1.get(ParamId(1)).unwrap(), &[3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(xs in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
                let n = xs.len();
                let mut tape = Tape::detached();
                let x = tape.constant(&Tensor::new(vec![1, n], xs.clone()).unwrap());
                let y = tape.softmax(x).unwrap();
                let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
                let xs2 = tape.constant(&Tensor::new(vec![1, n], shifted).unwrap());
                let y2 = tape.softmax(xs2).unwrap();
                let v = tape.value(y).to_vec();
                prop_assert!(v.iter().all(|&p| p >= 0.0));
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, b) in v.iter().zip(tape.value(y2)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
