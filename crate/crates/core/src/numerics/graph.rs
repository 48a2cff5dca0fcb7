//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its output value. [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products into the inputs.
//! Parameters are borrowed from a [`ParamSet`] rather than copied, so one
//! graph per training step is cheap to build.
//!
//! All values are treated as matrices: the trailing dimension is the
//! column count and everything before it is flattened into rows.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::scalar::{gemm_into, MatRef};
use super::{GradSet, ParamSet, Scalar, Tensor};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Caches the tanh term for the backward pass.
    Gelu(NodeId, Vec<T>),
    Selu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        probs: Vec<T>,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Mse(NodeId, Vec<T>),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits(NodeId, Vec<T>),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation; parameters are borrowed for `'p`.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    t.matrix_dims()
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input. Gradients are tracked if `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    /// Borrows `name` from `params`; frozen parameters never receive gradient.
    pub fn param(&mut self, params: &'p ParamSet<T>, name: &str) -> Result<NodeId> {
        let t = params.get(name)?;
        let ng = !params.is_frozen(name);
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Param(name.to_string()),
            needs_grad: ng,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `x · w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (m, k) = dims(self.value(x));
        let (k2, n) = dims(self.value(w));
        if k != k2 {
            return Err(shape_err(format!("linear input width {k} vs weight [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(shape_err(format!("bias length {} vs {n}", bias.len())));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm_into(
            MatRef::new(self.value(x).data(), m, k),
            MatRef::new(self.value(w).data(), k, n),
            &mut out,
            b.is_some(),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, ng))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, what: &str) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("{what} {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, |x, y| x + y, "add")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, |x, y| x - y, "sub")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, |x, y| x * y, "mul")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        let r = self.value(row).data();
        if r.len() != n {
            return Err(shape_err(format!("row of {} added to width {n}", r.len())));
        }
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, v) in chunk.iter_mut().zip(r) {
                *o = *o + *v;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != n || b.len() != n {
            return Err(shape_err(format!("layer norm affine of {} for width {n}", g.len())));
        }
        let xs = self.value(x).data();
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let xv = self.value(x);
        let th: Vec<T> = xv.data().iter().map(|&v| tanh(c * (v + k * v * v * v))).collect();
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&th).map(|(&v, &t)| half * v * (T::one() + t)).collect(),
        )
        .expect("shape preserved");
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x, th), ng)
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(selu_scalar);
        let ng = self.ng(x);
        self.push(t, Op::Selu(x), ng)
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q`, `k`, `v` are `[batch * seq, width]`; each block of `seq` rows is
    /// an independent sequence. Heads split the width evenly.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, seq: usize) -> Result<NodeId> {
        let (rows, width) = dims(self.value(q));
        if dims(self.value(k)) != (rows, width) || dims(self.value(v)) != (rows, width) {
            return Err(shape_err("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(shape_err(format!("{rows} rows is not a multiple of sequence length {seq}")));
        }
        let batch = rows / seq;
        let hd = width / heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let ws = width as isize;
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: head slices are in bounds: rows b*seq..(b+1)*seq, cols h*hd..(h+1)*hd.
                unsafe {
                    T::gemm(
                        seq,
                        hd,
                        seq,
                        scale,
                        qd.as_ptr().add(base),
                        ws,
                        1,
                        kd.as_ptr().add(base),
                        1,
                        ws,
                        T::zero(),
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for row in p.chunks_exact_mut(seq) {
                    softmax_in_place(row);
                }
                // SAFETY: as above; output block is disjoint per (b, h).
                unsafe {
                    T::gemm(
                        seq,
                        seq,
                        hd,
                        T::one(),
                        p.as_ptr(),
                        seq as isize,
                        1,
                        vd.as_ptr().add(base),
                        ws,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(base),
                        ws,
                        1,
                    );
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Selects rows of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err(format!("row {bad} out of {m}")));
        }
        if idx.is_empty() {
            return Err(shape_err("gather of zero rows".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::GatherRows(x, idx), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = dims(self.value(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = dims(self.value(p));
            if c != n {
                return Err(shape_err(format!("concat rows width {c} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = dims(self.value(parts[0])).0;
        let widths: Vec<usize> = parts.iter().map(|&p| dims(self.value(p)).1).collect();
        if parts.iter().any(|&p| dims(self.value(p)).0 != m) {
            return Err(shape_err("concat cols row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        if start >= end || end > n {
            return Err(shape_err(format!("column slice {start}..{end} of width {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, end - start], out)?, Op::SliceCols(x, start, end), ng))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err(format!("mse {:?} vs {:?}", p.shape(), target.shape())));
        }
        let n = T::from_f64(p.len() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            / n;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target.data().to_vec()), ng))
    }

    /// Mean cross-entropy of row-wise softmax over `logits` `[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, c) = dims(self.value(logits));
        if labels.len() != m {
            return Err(shape_err(format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_exact_mut(c).enumerate() {
            softmax_in_place(row);
            loss = loss - row[labels[r]].max(T::min_positive_value()).ln();
        }
        loss = loss / T::from_f64(m as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy with logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(shape_err(format!("bce {} logits vs {} targets", x.len(), targets.len())));
        }
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / T::from_f64(x.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.to_vec()), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s = t.sum() / T::from_f64(t.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: GradSet::new(),
            inputs: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(i, Tensor::new(node.value.shape().to_vec(), gy)?);
                }
                Op::Param(name) => {
                    let g = Tensor::new(node.value.shape().to_vec(), gy)?;
                    let mut one = GradSet::new();
                    one.insert(name.clone(), g);
                    out.params.accumulate(&one)?;
                }
                op => self.backprop_op(op, &node.value, &gy, &mut grads),
            }
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
        if !self.ng(id) {
            return None;
        }
        let n = self.value(id).len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_op(&self, op: &Op<T>, y: &Tensor<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) | Op::Linear { x: a, w: b, .. } => {
                let (m, k) = dims(self.value(*a));
                let n = dims(self.value(*b)).1;
                let gym = MatRef::new(gy, m, n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_into(gym, MatRef::new(bv, k, n).t(), ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_into(MatRef::new(av, m, k).t(), gym, gb, true);
                }
                if let Op::Linear { b: Some(bias), .. } = op {
                    if let Some(gbias) = self.acc(grads, *bias) {
                        for row in gy.chunks_exact(n) {
                            for (g, v) in gbias.iter_mut().zip(row) {
                                *g = *g + *v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(g) = self.acc(grads, id) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    for (o, v) in g.iter_mut().zip(gy) {
                        *o = *o - *v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((o, v), w) in g.iter_mut().zip(gy).zip(bv) {
                        *o = *o + *v * *w;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((o, v), w) in g.iter_mut().zip(gy).zip(av) {
                        *o = *o + *v * *w;
                    }
                }
            }
            Op::AddRow(x, row) => {
                let n = dims(self.value(*x)).1;
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *row) {
                    for chunk in gy.chunks_exact(n) {
                        add_into(g, chunk);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (o, v) in g.iter_mut().zip(gy) {
                        *o = *o + *v * *s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = dims(self.value(*x));
                let gam = self.value(*gamma).data();
                if let Some(g) = self.acc(grads, *gamma) {
                    for r in 0..m {
                        for c in 0..n {
                            g[c] = g[c] + gy[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for chunk in gy.chunks_exact(n) {
                        add_into(g, chunk);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let nf = T::from_f64(n as f64);
                    for r in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            let d = gy[r * n + c] * gam[c];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * n + c];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for c in 0..n {
                            let d = gy[r * n + c] * gam[c];
                            g[r * n + c] = g[r * n + c] + rstd[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x, th) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    let c = T::from_f64(GELU_C);
                    let half = T::from_f64(0.5);
                    let three_k = T::from_f64(3.0 * GELU_K);
                    for (((o, v), &x), &t) in g.iter_mut().zip(gy).zip(xv).zip(th) {
                        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three_k * x * x);
                        *o = *o + *v * d;
                    }
                }
            }
            Op::Selu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    let lam = T::from_f64(SELU_LAMBDA);
                    let la = T::from_f64(SELU_LAMBDA * SELU_ALPHA);
                    for ((o, v), &x) in g.iter_mut().zip(gy).zip(xv) {
                        let d = if x > T::zero() { lam } else { la * x.exp() };
                        *o = *o + *v * d;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *seq, probs, gy, grads),
            Op::GatherRows(x, idx) => {
                let n = dims(self.value(*x)).1;
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.acc(grads, p) {
                        add_into(g, &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = dims(y).1;
                let mut col = 0;
                for &p in parts {
                    let (m, w) = dims(self.value(p));
                    if let Some(g) = self.acc(grads, p) {
                        for r in 0..m {
                            add_into(&mut g[r * w..(r + 1) * w], &gy[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = dims(self.value(*x));
                let w = end - start;
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        add_into(&mut g[r * n + start..r * n + end], &gy[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred).data();
                if let Some(g) = self.acc(grads, *pred) {
                    let s = gy[0] * T::from_f64(2.0 / pv.len() as f64);
                    for ((o, p), t) in g.iter_mut().zip(pv).zip(target) {
                        *o = *o + s * (*p - *t);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (m, c) = dims(self.value(*logits));
                if let Some(g) = self.acc(grads, *logits) {
                    let s = gy[0] / T::from_f64(m as f64);
                    for r in 0..m {
                        for j in 0..c {
                            let onehot = if labels[r] == j { T::one() } else { T::zero() };
                            g[r * c + j] = g[r * c + j] + s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::BceWithLogits(logits, targets) => {
                let xv = self.value(*logits).data();
                if let Some(g) = self.acc(grads, *logits) {
                    let s = gy[0] / T::from_f64(xv.len() as f64);
                    for ((o, x), t) in g.iter_mut().zip(xv).zip(targets) {
                        *o = *o + s * (sigmoid(*x) - *t);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|o| *o = *o + gy[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len() as f64);
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|o| *o = *o + gy[0] / n);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, width) = dims(self.value(q));
        let batch = rows / seq;
        let hd = width / heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let ws = width as isize;
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); rows * width];
        let mut gk = vec![T::zero(); rows * width];
        let mut gv = vec![T::zero(); rows * width];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: all views stay within the [rows, width] buffers
                // (rows b*seq.., cols h*hd..) or the seq x seq scratch.
                unsafe {
                    // dV = P^T dO
                    T::gemm(seq, seq, hd, T::one(), p.as_ptr(), 1, seq as isize, gy.as_ptr().add(base), ws, 1, T::zero(), gv.as_mut_ptr().add(base), ws, 1);
                    // dP = dO V^T
                    T::gemm(seq, hd, seq, T::one(), gy.as_ptr().add(base), ws, 1, vd.as_ptr().add(base), 1, ws, T::zero(), dp.as_mut_ptr(), seq as isize, 1);
                }
                // dS = P ⊙ (dP - rowsum(dP ⊙ P))
                for r in 0..seq {
                    let pr = &p[r * seq..(r + 1) * seq];
                    let dr = &mut dp[r * seq..(r + 1) * seq];
                    let dot = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum::<T>();
                    for (d, pv) in dr.iter_mut().zip(pr) {
                        *d = *pv * (*d - dot);
                    }
                }
                unsafe {
                    // dQ = dS K * scale
                    T::gemm(seq, seq, hd, scale, dp.as_ptr(), seq as isize, 1, kd.as_ptr().add(base), ws, 1, T::zero(), gq.as_mut_ptr().add(base), ws, 1);
                    // dK = dS^T Q * scale
                    T::gemm(seq, seq, hd, scale, dp.as_ptr(), 1, seq as isize, qd.as_ptr().add(base), ws, 1, T::zero(), gk.as_mut_ptr().add(base), ws, 1);
                }
            }
        }
        for (id, g) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, id) {
                add_into(acc, &g);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    params: GradSet<T>,
    inputs: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradients of the parameters that were reached.
    pub fn params(&self) -> &GradSet<T> {
        &self.params
    }

    pub fn into_params(self) -> GradSet<T> {
        self.params
    }

    /// Gradient for every non-frozen parameter in `params`, zero-filled
    /// where the loss does not depend on it. Frozen names are absent.
    pub fn for_params(&self, params: &ParamSet<T>) -> GradSet<T> {
        let mut out = GradSet::new();
        for (name, t) in params.iter() {
            if params.is_frozen(name) {
                continue;
            }
            let g = self
                .params
                .get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// Gradient with respect to an input created with `requires_grad`.
    pub fn input(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inputs.get(&id.0)
    }
}

/// `tanh` through one `exp`; cheaper than the libm routine and accurate to
/// a few ulps of 1 away from zero.
fn tanh<T: Scalar>(x: T) -> T {
    let two = T::from_f64(2.0);
    if x.abs() < T::from_f64(0.05) {
        return x.tanh();
    }
    T::one() - two / ((two * x).exp() + T::one())
}

pub fn selu_scalar<T: Scalar>(x: T) -> T {
    let lam = T::from_f64(SELU_LAMBDA);
    if x > T::zero() {
        lam * x
    } else {
        lam * T::from_f64(SELU_ALPHA) * (x.exp() - T::one())
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}
