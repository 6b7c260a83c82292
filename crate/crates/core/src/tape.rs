//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables as a node in
//! a flat list. Because a node can only reference nodes created before it,
//! the list is already in topological order, and [`Tape::backward`] walks it
//! once from the end. Gradients accumulate into each input, so a leaf that
//! is consumed along several paths (the shared rows of a parameter pool, a
//! hidden state fed to two gates) receives the sum of every contribution.
//!
//! Every forward operation checks its result for NaN and infinities and
//! reports [`Error::NonFinite`] instead of propagating them.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Mask(Var, Rc<Tensor>),
    Scale(Var, f64),
    GatherRows { src: Var, rows: Rc<[usize]> },
    SliceRows { src: Var, start: usize },
    Embedding { table: Var, ids: Rc<[usize]> },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate corruption of one backward rule, used as a negative control
/// for gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the tanh derivative by 1.01.
    TanhDerivative,
}

/// Records a forward computation and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and gradients so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    /// A leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// `None` if `backward` has not run or no gradient reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.record(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`rows` bias vector to every column of a `rows × cols` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.rank() != 2 || tb.rank() != 1 || tb.len() != ta.rows() {
            return Err(Error::shape("add_bias", ta.shape(), tb.shape()));
        }
        let cols = ta.cols();
        let mut out = ta.clone();
        for (row, &b) in out.data_mut().chunks_mut(cols).zip(tb.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        self.record("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.record("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// Elementwise product with a fixed mask, e.g. a pre-sampled dropout mask.
    pub fn apply_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != mask.shape() {
            return Err(Error::shape("apply_mask", ta.shape(), mask.shape()));
        }
        let data = ta.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.record("apply_mask", out, Op::Mask(a, Rc::new(mask)), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.record("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Gathers the listed rows of `src`, keeping the first `cols` columns.
    ///
    /// For a rank 1 `src` the result is a vector and `cols` is ignored.
    /// The backward pass scatter-adds into the gathered rows, so a row
    /// listed by several gathers accumulates every contribution.
    pub fn gather_rows(&mut self, src: Var, rows: Rc<[usize]>, cols: usize) -> Result<Var> {
        let t = self.value(src);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::validation(format!(
                "gather row {bad} out of range for {:?}",
                t.shape()
            )));
        }
        if rows.is_empty() {
            return Err(Error::validation("gather of zero rows"));
        }
        let out = match t.rank() {
            1 => Tensor::vector(rows.iter().map(|&r| t.data()[r]).collect()),
            2 => {
                if cols == 0 || cols > t.cols() {
                    return Err(Error::shape("gather_rows", t.shape(), &[rows.len(), cols]));
                }
                let mut data = Vec::with_capacity(rows.len() * cols);
                for &r in rows.iter() {
                    data.extend_from_slice(&t.row(r)[..cols]);
                }
                Tensor::new(&[rows.len(), cols], data)?
            }
            _ => return Err(Error::shape("gather_rows", t.shape(), &[rows.len(), cols])),
        };
        self.record("gather_rows", out, Op::GatherRows { src, rows }, &[src])
    }

    /// Rows `start..start + len` of a matrix or vector.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if len == 0 || start + len > t.rows() || t.rank() == 0 {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, data)?;
        self.record("slice_rows", out, Op::SliceRows { src, start }, &[src])
    }

    /// Looks up `ids` in a `vocab × dim` table, producing a `dim × ids.len()` matrix.
    pub fn embedding(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (vocab, dim) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::validation(format!("token id {bad} >= vocabulary {vocab}")));
        }
        let n = ids.len();
        let mut out = Tensor::zeros(&[dim, n]);
        for (b, &id) in ids.iter().enumerate() {
            for (e, &v) in t.row(id).iter().enumerate() {
                out.data_mut()[e * n + b] = v;
            }
        }
        self.record("embedding", out, Op::Embedding { table, ids }, &[table])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        self.record("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, Op::Sum(a), &[a])
    }

    /// Mean over columns of `-log softmax(logits[:, n])[targets[n]]`.
    ///
    /// `logits` is `vocab × positions`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.cols() != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let (probs, loss) = softmax_cross_entropy(t, &targets)?;
        let out = Tensor::scalar(loss);
        self.record(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        )
    }

    /// Differentiates the scalar `loss` with respect to every node.
    ///
    /// May be called once per recorded graph; call [`Tape::reset`] before
    /// recording a new one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape; reset it first".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[]));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let tanh_scale = match self.fault {
            Some(Fault::TanhDerivative) => 1.01,
            None => 1.0,
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = slot(grads, nodes, *a) {
                    gemm_nt(g.data(), tb.data(), ga.data_mut(), p, q, r);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gemm_tn(ta.data(), g.data(), gb.data_mut(), p, q, r);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gv * bv;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for ((x, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gv * av;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.add_assign(g);
                }
                let cols = g.cols();
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for (x, row) in gb.data_mut().iter_mut().zip(g.data().chunks(cols)) {
                        *x += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *x += gv * (1.0 - y * y) * tanh_scale;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *x += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Mask(a, mask) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, gv), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                        *x += gv * m;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (x, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gv * factor;
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                if let Some(gs) = slot(grads, nodes, *src) {
                    let src_cols = gs.cols();
                    let cols = g.cols();
                    for (o, &r) in rows.iter().enumerate() {
                        let dst = &mut gs.data_mut()[r * src_cols..r * src_cols + cols];
                        for (x, gv) in dst.iter_mut().zip(&g.data()[o * cols..(o + 1) * cols]) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::SliceRows { src, start } => {
                if let Some(gs) = slot(grads, nodes, *src) {
                    let c = gs.cols();
                    let dst = &mut gs.data_mut()[start * c..start * c + g.len()];
                    for (x, gv) in dst.iter_mut().zip(g.data()) {
                        *x += gv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(grads, nodes, *table) {
                    let dim = gt.cols();
                    let n = ids.len();
                    for (b, &id) in ids.iter().enumerate() {
                        for e in 0..dim {
                            gt.data_mut()[id * dim + e] += g.data()[e * n + b];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        for r in 0..gp.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + c];
                            for (x, gv) in gp.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *x += gv;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.data_mut().iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let scale = g.item() / n as f64;
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for (x, p) in gl.data_mut().iter_mut().zip(probs.data()) {
                        *x += p * scale;
                    }
                    for (col, &t) in targets.iter().enumerate() {
                        gl.data_mut()[t * n + col] -= scale;
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'g mut Tensor> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column-wise softmax probabilities and mean cross-entropy of `targets`.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, f64)> {
    let (vocab, n) = (logits.rows(), logits.cols());
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::validation(format!("target id {bad} >= vocabulary {vocab}")));
    }
    let data = logits.data();
    let mut probs = vec![0.0; vocab * n];
    let mut total = 0.0;
    for (col, &target) in targets.iter().enumerate() {
        let max = (0..vocab).map(|r| data[r * n + col]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in 0..vocab {
            let e = (data[r * n + col] - max).exp();
            probs[r * n + col] = e;
            z += e;
        }
        for r in 0..vocab {
            probs[r * n + col] /= z;
        }
        total += max + z.ln() - data[target * n + col];
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((Tensor::new(&[vocab, n], probs)?, loss))
}
