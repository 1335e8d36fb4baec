//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and the graph is acyclic by construction. `backward`
//! walks it once in reverse.

use std::collections::HashMap;

use crate::error::{contract, shape_err, Result, TensorError};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Attention visibility pattern.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Row-major `Lq×Lk` flags, `true` = allowed.
    Allow(Vec<bool>),
}

/// Additive score applied to forbidden attention positions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Bcast {
    Same,
    /// `b` matches the trailing dims of `a`.
    Suffix(usize),
    /// `a` is `[r×c]`, `b` is `[r×1]`.
    Col(usize),
    General(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn idx(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Col(c) => i / c,
            Bcast::General(map) => map[i],
        }
    }

    fn plan(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Bcast::Same);
        }
        if b.len() > a.len() {
            return None;
        }
        let off = a.len() - b.len();
        if b.iter()
            .zip(&a[off..])
            .any(|(&bd, &ad)| bd != ad && bd != 1)
        {
            return None;
        }
        if b.iter().zip(&a[off..]).all(|(bd, ad)| bd == ad) {
            return Some(Bcast::Suffix(b.iter().product::<usize>().max(1)));
        }
        if a.len() == 2 && b.len() == 2 && b[0] == a[0] && b[1] == 1 {
            return Some(Bcast::Col(a[1]));
        }
        // General right-aligned broadcast.
        let mut bstrides = vec![0usize; a.len()];
        let mut s = 1;
        for d in (0..b.len()).rev() {
            if b[d] != 1 {
                bstrides[off + d] = s;
            }
            s *= b[d];
        }
        let n: usize = a.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut index = vec![0usize; a.len()];
        for _ in 0..n {
            map.push(index.iter().zip(&bstrides).map(|(i, s)| i * s).sum());
            for d in (0..a.len()).rev() {
                index[d] += 1;
                if index[d] < a[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        Some(Bcast::General(map))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Elem {
        a: Var,
        b: Var,
        kind: ElemKind,
        map: Bcast,
    },
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var),
    Mean(Var, Axis),
    Variance(Var, Axis, Vec<T>),
    SumAll(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Standardize(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    StraightThrough(Var),
    WeightedPair(Var, Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward evaluation and its reverse pass.
///
/// A graph is single-use: `backward` may run once; `reset_grads` re-arms it.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    bound: HashMap<ParamId, Var>,
    grads: HashMap<usize, Tensor<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            bound: HashMap::new(),
            grads: HashMap::new(),
            consumed: false,
        }
    }

    /// Graph whose parameters do not require gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tensor(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("input", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the
    /// same node, so shared weights accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let record = self.record;
        let v = self.push("param", store.get(id).clone(), Op::Param, record)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (sa.dims2(), sb.dims2()) else {
            return shape_err("matmul", sa.shape(), sb.shape());
        };
        if k != k2 {
            return shape_err("matmul", sa.shape(), sb.shape());
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(sa.data(), sb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Self::tensor(&[m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let ng = self.needs(x);
        self.push("transpose", t, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    // ---- elementwise --------------------------------------------------

    /// Pointwise `a ∘ b`. `b` may broadcast into `a`'s shape: aligned on
    /// trailing dims, each of `b`'s dims equal to `a`'s or 1. The result has
    /// `a`'s shape.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElemKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let Some(map) = Bcast::plan(ta.shape(), tb.shape()) else {
            return shape_err("elementwise", ta.shape(), tb.shape());
        };
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<T> = (0..da.len())
            .map(|i| {
                let (x, y) = (da[i], db[map.idx(i)]);
                match kind {
                    ElemKind::Add => x + y,
                    ElemKind::Sub => x - y,
                    ElemKind::Mul => x * y,
                    ElemKind::Div => x / y,
                }
            })
            .collect();
        let t = Self::tensor(ta.shape(), out);
        let ng = self.needs(a) || self.needs(b);
        self.push("elementwise", t, Op::Elem { a, b, kind, map }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Div)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push("scale", t, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push("add_scalar", t, Op::Shift(x), ng)
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(name, t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sqrt", |v| v.sqrt(), Op::Sqrt(x))
    }

    // ---- normalisation and reductions --------------------------------

    /// Softmax along `axis`; the axis max is subtracted before exponentiation.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return contract(format!("softmax axis {axis} for shape {:?}", t.shape()));
        }
        let ax = Axis::of(t.shape(), axis);
        let mut out = t.data().to_vec();
        softmax_in_place(&mut out, ax);
        let t = Self::tensor(t.shape(), out);
        let ng = self.needs(x);
        self.push("softmax", t, Op::Softmax(x, ax), ng)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Self::tensor(t.shape(), out);
        let ng = self.needs(x);
        self.push("log_softmax", t, Op::LogSoftmax(x), ng)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return contract(format!("mean axis {axis} for shape {:?}", t.shape()));
        }
        let ax = Axis::of(t.shape(), axis);
        let means = axis_means(t.data(), ax);
        let t = Self::tensor(&Self::reduced_shape(t.shape(), axis), means);
        let ng = self.needs(x);
        self.push("mean_axis", t, Op::Mean(x, ax), ng)
    }

    /// Population variance (divides by n) along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return contract(format!("variance axis {axis} for shape {:?}", t.shape()));
        }
        let ax = Axis::of(t.shape(), axis);
        let means = axis_means(t.data(), ax);
        let d = t.data();
        let mut vars = vec![T::zero(); ax.outer * ax.inner];
        let n = T::lit(ax.len as f64);
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let mu = means[o * ax.inner + i];
                let mut acc = T::zero();
                for j in 0..ax.len {
                    let dv = d[(o * ax.len + j) * ax.inner + i] - mu;
                    acc += dv * dv;
                }
                vars[o * ax.inner + i] = acc / n;
            }
        }
        let t = Self::tensor(&Self::reduced_shape(t.shape(), axis), vars);
        let ng = self.needs(x);
        self.push("var_axis", t, Op::Variance(x, ax, means), ng)
    }

    /// Mean and population variance along `axis`.
    pub fn reduce_moments(&mut self, x: Var, axis: usize) -> Result<(Var, Var)> {
        Ok((self.mean_axis(x, axis)?, self.var_axis(x, axis)?))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis.
    pub fn standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let n = T::lit(c as f64);
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * is);
            inv_std.push(is);
        }
        let t = Self::tensor(t.shape(), out);
        let ng = self.needs(x);
        self.push("standardize", t, Op::Standardize(x, inv_std), ng)
    }

    // ---- slicing and gathering ---------------------------------------

    fn matrix(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(x);
        t.dims2()
            .map_or_else(|| shape_err(op, t.shape(), &[]), Ok)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return contract(format!("column slice {start}..{} of {c}", start + len));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        self.push("slice_cols", Self::tensor(&[r, len], out), Op::SliceCols(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat of nothing");
        }
        let r = self.matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_cols")?;
            if pr != r {
                return shape_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Self::tensor(&[r, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return contract(format!("row slice {start}..{} of {r}", start + len));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push("slice_rows", Self::tensor(&[len, c], out), Op::SliceRows(x, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat of nothing");
        }
        let c = self.matrix(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_rows")?;
            if pc != c {
                return shape_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Self::tensor(&[rows, c], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `ids` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(table, "gather_rows")?;
        if ids.is_empty() {
            return contract("gather of no rows");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return contract(format!("row id {bad} out of range for table with {r} rows"));
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let ng = self.needs(table);
        self.push("gather_rows", Self::tensor(&[ids.len(), c], out), Op::Gather(table, ids.to_vec()), ng)
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "pick")?;
        if idx.len() != r {
            return shape_err("pick", &[r, c], &[idx.len()]);
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return contract(format!("column {bad} out of range for width {c}"));
        }
        let d = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let ng = self.needs(x);
        self.push("pick", Self::tensor(&[r], out), Op::Pick(x, idx.to_vec()), ng)
    }

    // ---- fused model ops ---------------------------------------------

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`,
    /// split into `heads` column blocks and concatenated back. Forbidden
    /// positions get `MASK_NEG` added before the softmax, so their weight
    /// underflows to exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<Var> {
        let (lq, d) = self.matrix(q, "attention")?;
        let (lk, dk) = self.matrix(k, "attention")?;
        let (lv, dv) = self.matrix(v, "attention")?;
        if dk != d || dv != d || lv != lk {
            return shape_err("attention", self.shape(k), self.shape(v));
        }
        if heads == 0 || d % heads != 0 {
            return contract(format!("{heads} heads do not divide width {d}"));
        }
        let allow = |i: usize, j: usize| match mask {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Allow(flags) => flags[i * lk + j],
        };
        if let Mask::Allow(flags) = mask {
            if flags.len() != lq * lk {
                return shape_err("attention mask", &[lq, lk], &[flags.len()]);
            }
        }
        if let Some(i) = (0..lq).find(|&i| (0..lk).all(|j| !allow(i, j))) {
            return contract(format!("attention mask forbids every key for query {i}"));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let neg = T::lit(MASK_NEG);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for j in 0..lk {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut s = kernels::dot(qi, kj) * scale;
                    if !allow(i, j) {
                        s += neg;
                    }
                    row[j] = s;
                }
                softmax_in_place(row, Axis { outer: 1, len: lk, inner: 1 });
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            Self::tensor(&[lq, d], out),
            Op::Attention { q, k, v, heads, probs },
            ng,
        )
    }

    /// Attention weights saved by an [`attention`](Self::attention) node,
    /// laid out `[heads × Lq × Lk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Straight-through estimator: the forward value is `hard`, the gradient
    /// is passed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return shape_err("straight_through", hard.shape(), self.shape(soft));
        }
        let ng = self.needs(soft);
        self.push("straight_through", hard, Op::StraightThrough(soft), ng)
    }

    /// Row-wise mix `out[i] = a[i]·w[i,0] + b[i]·w[i,1]`. Rows whose weights
    /// are exactly `[1,0]` or `[0,1]` copy the selected row bit for bit.
    pub fn weighted_pair(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "weighted_pair")?;
        if self.shape(b) != [r, c] {
            return shape_err("weighted_pair", self.shape(a), self.shape(b));
        }
        if self.shape(w) != [r, 2] {
            return shape_err("weighted_pair", &[r, 2], self.shape(w));
        }
        let (ad, bd, wd) = (self.value(a).data(), self.value(b).data(), self.value(w).data());
        let (one, zero) = (T::one(), T::zero());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let (w0, w1) = (wd[2 * i], wd[2 * i + 1]);
            let (ar, br) = (&ad[i * c..(i + 1) * c], &bd[i * c..(i + 1) * c]);
            if w0 == one && w1 == zero {
                out.extend_from_slice(ar);
            } else if w0 == zero && w1 == one {
                out.extend_from_slice(br);
            } else {
                out.extend(ar.iter().zip(br).map(|(&x, &y)| x * w0 + y * w1));
            }
        }
        let ng = self.needs(a) || self.needs(b) || self.needs(w);
        self.push("weighted_pair", Self::tensor(&[r, c], out), Op::WeightedPair(a, b, w), ng)
    }

    // ---- reverse pass -------------------------------------------------

    /// Populates gradients of every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::State(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                self.grads.insert(i, g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = node.value.data();
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.cols();
                acc(grads, *a, &mut |da| kernels::matmul_a_bt_acc(gd, tb.data(), da, m, n, k));
                acc(grads, *b, &mut |db| kernels::matmul_at_b_acc(ta.data(), gd, db, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2().unwrap();
                let t = kernels::transpose(gd, r, c);
                acc(grads, *x, &mut |dx| add_into(dx, &t));
            }
            Op::Reshape(x) => acc(grads, *x, &mut |dx| add_into(dx, gd)),
            Op::Elem { a, b, kind, map } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                match kind {
                    ElemKind::Add => {
                        acc(grads, *a, &mut |dx| add_into(dx, gd));
                        acc(grads, *b, &mut |dx| {
                            gd.iter().enumerate().for_each(|(j, &gv)| dx[map.idx(j)] += gv)
                        });
                    }
                    ElemKind::Sub => {
                        acc(grads, *a, &mut |dx| add_into(dx, gd));
                        acc(grads, *b, &mut |dx| {
                            gd.iter().enumerate().for_each(|(j, &gv)| dx[map.idx(j)] -= gv)
                        });
                    }
                    ElemKind::Mul => {
                        acc(grads, *a, &mut |dx| {
                            dx.iter_mut().enumerate().for_each(|(j, d)| *d += gd[j] * bd[map.idx(j)])
                        });
                        acc(grads, *b, &mut |dx| {
                            gd.iter().enumerate().for_each(|(j, &gv)| dx[map.idx(j)] += gv * ad[j])
                        });
                    }
                    ElemKind::Div => {
                        acc(grads, *a, &mut |dx| {
                            dx.iter_mut().enumerate().for_each(|(j, d)| *d += gd[j] / bd[map.idx(j)])
                        });
                        acc(grads, *b, &mut |dx| {
                            gd.iter().enumerate().for_each(|(j, &gv)| {
                                let bv = bd[map.idx(j)];
                                dx[map.idx(j)] -= gv * ad[j] / (bv * bv)
                            })
                        });
                    }
                }
            }
            Op::Scale(x, c) => acc(grads, *x, &mut |dx| {
                dx.iter_mut().zip(gd).for_each(|(d, &gv)| *d += gv * *c)
            }),
            Op::Shift(x) => acc(grads, *x, &mut |dx| add_into(dx, gd)),
            Op::Relu(x) => acc(grads, *x, &mut |dx| {
                for j in 0..dx.len() {
                    if y[j] > T::zero() {
                        dx[j] += gd[j];
                    }
                }
            }),
            Op::Tanh(x) => acc(grads, *x, &mut |dx| {
                for j in 0..dx.len() {
                    dx[j] += gd[j] * (T::one() - y[j] * y[j]);
                }
            }),
            Op::Exp(x) => acc(grads, *x, &mut |dx| {
                for j in 0..dx.len() {
                    dx[j] += gd[j] * y[j];
                }
            }),
            Op::Log(x) => {
                let xd = self.value(*x).data();
                acc(grads, *x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += gd[j] / xd[j];
                    }
                })
            }
            Op::Sqrt(x) => acc(grads, *x, &mut |dx| {
                for j in 0..dx.len() {
                    dx[j] += gd[j] / (T::lit(2.0) * y[j]);
                }
            }),
            Op::Softmax(x, ax) => acc(grads, *x, &mut |dx| {
                for o in 0..ax.outer {
                    for inn in 0..ax.inner {
                        let at = |j: usize| (o * ax.len + j) * ax.inner + inn;
                        let dot: T = (0..ax.len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..ax.len {
                            dx[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                acc(grads, *x, &mut |dx| {
                    for r in 0..dx.len() / c {
                        let s: T = gd[r * c..(r + 1) * c].iter().copied().sum();
                        for j in r * c..(r + 1) * c {
                            dx[j] += gd[j] - y[j].exp() * s;
                        }
                    }
                })
            }
            Op::Mean(x, ax) => {
                let n = T::lit(ax.len as f64);
                acc(grads, *x, &mut |dx| {
                    for o in 0..ax.outer {
                        for inn in 0..ax.inner {
                            let gv = gd[o * ax.inner + inn] / n;
                            for j in 0..ax.len {
                                dx[(o * ax.len + j) * ax.inner + inn] += gv;
                            }
                        }
                    }
                })
            }
            Op::Variance(x, ax, means) => {
                let xd = self.value(*x).data();
                let n = T::lit(ax.len as f64);
                acc(grads, *x, &mut |dx| {
                    for o in 0..ax.outer {
                        for inn in 0..ax.inner {
                            let r = o * ax.inner + inn;
                            let gv = gd[r] * T::lit(2.0) / n;
                            for j in 0..ax.len {
                                let at = (o * ax.len + j) * ax.inner + inn;
                                dx[at] += gv * (xd[at] - means[r]);
                            }
                        }
                    }
                })
            }
            Op::SumAll(x) => acc(grads, *x, &mut |dx| dx.iter_mut().for_each(|d| *d += gd[0])),
            Op::SliceCols(x, start) => {
                let (r, len) = g.dims2().unwrap();
                let c = self.value(*x).cols();
                acc(grads, *x, &mut |dx| {
                    for i in 0..r {
                        add_into(&mut dx[i * c + start..i * c + start + len], &gd[i * len..(i + 1) * len]);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(grads, *p, &mut |dx| {
                        for i in 0..r {
                            add_into(&mut dx[i * w..(i + 1) * w], &gd[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = g.cols();
                acc(grads, *x, &mut |dx| add_into(&mut dx[start * c..start * c + gd.len()], gd))
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(grads, *p, &mut |dx| add_into(dx, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::Gather(table, ids) => {
                let c = g.cols();
                acc(grads, *table, &mut |dx| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dx[id * c..(id + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                })
            }
            Op::Pick(x, idx) => {
                let c = self.value(*x).cols();
                acc(grads, *x, &mut |dx| {
                    for (r, &j) in idx.iter().enumerate() {
                        dx[r * c + j] += gd[r];
                    }
                })
            }
            Op::Standardize(x, inv_std) => {
                let c = node.value.cols();
                let n = T::lit(c as f64);
                acc(grads, *x, &mut |dx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&gd[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            dx[r * c + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                })
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(gd, *q, *k, *v, *heads, probs, grads, &acc)
            }
            Op::StraightThrough(soft) => acc(grads, *soft, &mut |dx| add_into(dx, gd)),
            Op::WeightedPair(a, b, w) => {
                let (r, c) = g.dims2().unwrap();
                let (ad, bd, wd) = (self.value(*a).data(), self.value(*b).data(), self.value(*w).data());
                acc(grads, *a, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[i * c + j] * wd[2 * i];
                        }
                    }
                });
                acc(grads, *b, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[i * c + j] * wd[2 * i + 1];
                        }
                    }
                });
                acc(grads, *w, &mut |dx| {
                    for i in 0..r {
                        let gr = &gd[i * c..(i + 1) * c];
                        dx[2 * i] += kernels::dot(gr, &ad[i * c..(i + 1) * c]);
                        dx[2 * i + 1] += kernels::dot(gr, &bd[i * c..(i + 1) * c]);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
        acc: &dyn Fn(&mut [Option<Tensor<T>>], Var, &mut dyn FnMut(&mut [T])),
    ) {
        let (lq, d) = self.value(q).dims2().unwrap();
        let lk = self.value(k).rows();
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut ds = vec![T::zero(); lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let go = &gd[i * d + off..i * d + off + dh];
                let mut inner = T::zero();
                for j in 0..lk {
                    let dp = kernels::dot(go, &vd[j * d + off..j * d + off + dh]);
                    ds[j] = dp;
                    inner += p[j] * dp;
                    if p[j] != T::zero() {
                        for (dvv, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                            *dvv += p[j] * gv;
                        }
                    }
                }
                for j in 0..lk {
                    let s = p[j] * (ds[j] - inner) * scale;
                    if s == T::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += s * kd[j * d + off + t];
                        dk[j * d + off + t] += s * qd[i * d + off + t];
                    }
                }
            }
        }
        acc(grads, q, &mut |dx| add_into(dx, &dq));
        acc(grads, k, &mut |dx| add_into(dx, &dk));
        acc(grads, v, &mut |dx| add_into(dx, &dv));
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, v)| self.grads.get(&v.0).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn axis_means<T: Scalar>(d: &[T], ax: Axis) -> Vec<T> {
    let n = T::lit(ax.len as f64);
    let mut means = vec![T::zero(); ax.outer * ax.inner];
    for o in 0..ax.outer {
        for j in 0..ax.len {
            for i in 0..ax.inner {
                means[o * ax.inner + i] += d[(o * ax.len + j) * ax.inner + i];
            }
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    means
}

fn softmax_in_place<T: Scalar>(d: &mut [T], ax: Axis) {
    for o in 0..ax.outer {
        for i in 0..ax.inner {
            let at = |j: usize| (o * ax.len + j) * ax.inner + i;
            let m = (0..ax.len).fold(T::neg_infinity(), |a, j| a.max(d[at(j)]));
            let mut s = T::zero();
            for j in 0..ax.len {
                let e = (d[at(j)] - m).exp();
                d[at(j)] = e;
                s += e;
            }
            for j in 0..ax.len {
                d[at(j)] /= s;
            }
        }
    }
}
