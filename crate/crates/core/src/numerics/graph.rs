//! Reverse-mode differentiation over a recorded list of dense ops.
//!
//! Every op below carries its own hand-written backward rule; the graph only
//! records which op produced which value so a whole tracking clip (several
//! frames, carried state) can be differentiated in one sweep. Parameters are
//! referenced from the [`ParamStore`] without copying. Frozen parameters and
//! constants never receive gradients, and any op whose inputs all lack
//! gradients is skipped on the way back.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::numerics::ops::{
    self, inv_rms, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid_scalar,
    silu_scalar, softmax_row, softplus_scalar, SOFTPLUS_LINEAR_CUTOFF,
};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum NodeValue {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Attention(Box<AttentionOp>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    DepthwiseConv { x: Var, kernel: Var },
    SsmTransition { h_prev: Var, delta: Var, a: Var, b: Var, s1: Var },
    SsmReadout { h: Var, c: Var, d: Var, s1: Var },
    FocalLoss { logits: Var, target: Tensor, alpha: f64, beta: f64 },
    CrossEntropy { logits: Var, class: usize },
    GiouLoss { pred: Var, gt: [f64; 4] },
    L1Loss { pred: Var, gt: [f64; 4] },
}

struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    /// `heads × nq × nk` softmax weights, kept for backward and inspection.
    probs: Vec<f64>,
}

struct Node {
    value: NodeValue,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Borrow the parameter store for the graph's lifetime.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    // Ordered so gradient lists (and the clipping norm) are reproducible.
    param_nodes: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.nodes[v.0].as_ref().map(|g| (*p, g)))
    }
}

fn same_len(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(id) => self.store.value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: NodeValue::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf referencing a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: NodeValue::Param(id),
            op: Op::Leaf,
            requires_grad: self.store.get(id).trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (for checking gradients w.r.t. inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ops::matmul(ta, tb)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b`, with `b` a `1 × n` (or length-`n`) row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        if tw.rows() != k {
            return Err(dim_err!("linear: input width {k} vs weight {:?}", tw.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(tx.data(), tw.data(), &mut out, m, k, n);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != n {
                return Err(dim_err!("linear: bias {} vs {n}", tb.len()));
            }
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.cols();
        if tr.len() != d {
            return Err(dim_err!("add_row: row {} vs width {d}", tr.len()));
        }
        let mut out = tx.clone();
        for r in out.data_mut().chunks_mut(d.max(1)) {
            for (o, v) in r.iter_mut().zip(tr.data()) {
                *o += v;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every row of `x` elementwise by a `1 × d` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.cols();
        if tr.len() != d {
            return Err(dim_err!("mul_row: row {} vs width {d}", tr.len()));
        }
        let mut out = tx.clone();
        for r in out.data_mut().chunks_mut(d.max(1)) {
            for (o, v) in r.iter_mut().zip(tr.data()) {
                *o *= v;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu_scalar);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_scalar);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let out = ops::rms_norm(self.value(x), self.value(gain), eps)?;
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, eps }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `nq × d`, `k` and `v` are `nk × d`; head `h` uses columns
    /// `h·d/H .. (h+1)·d/H`. `bias`, when given, is a constant `heads × nk`
    /// table added to every query row's logits for that head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        bias: Option<&Tensor>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d, nk) = (tq.rows(), tq.cols(), tk.rows());
        if tk.cols() != d || tv.cols() != d || tv.rows() != nk {
            return Err(dim_err!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(dim_err!("attention: width {d} not divisible by {heads} heads"));
        }
        if nk == 0 {
            return Err(Error::State("attention over zero keys".into()));
        }
        if let Some(b) = bias {
            if b.len() != heads * nk {
                return Err(dim_err!("attention: bias {:?} vs {heads}×{nk}", b.shape()));
            }
        }
        let dh = d / heads;
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qrow = &qd[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &kd[j * d + off..j * d + off + dh];
                    let mut s = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        s += a * b;
                    }
                    *p = s * scale + bias.map_or(0.0, |b| b.data()[h * nk + j]);
                }
                softmax_row(prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vd[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        let op = AttentionOp {
            q,
            k,
            v,
            heads,
            scale,
            probs,
        };
        Ok(self.push(Tensor::matrix(nq, d, out), Op::Attention(Box::new(op)), rg))
    }

    /// Softmax weights of an attention node as `(heads, nq, nk, weights)`.
    pub fn attention_weights(&self, v: Var) -> Option<(usize, usize, usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => {
                let nq = self.value(a.q).rows();
                let nk = self.value(a.k).rows();
                Some((a.heads, nq, nk, &a.probs))
            }
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(dim_err!("concat_cols: row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, width, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(dim_err!("slice_rows {start}+{len} of {}", t.rows()));
        }
        let out = t.slice_rows(start, len);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + len > c {
            return Err(dim_err!("slice_cols {start}+{len} of {c}"));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rows = t.rows();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(rows, len, out), Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(dim_err!("gather_rows: row {bad} of {}", t.rows()));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / n.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::depthwise_conv1d(self.value(x), self.value(kernel))?;
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(out, Op::DepthwiseConv { x, kernel }, rg))
    }

    /// One discretized state-space transition.
    ///
    /// `h_prev` is `n × (ds·e)`, `delta` and `s1` are `n × ds`, `a` is
    /// `ds × e`, `b` is `n × e`:
    /// `h[n,d,j] = exp(Δ[n,d]·a[d,j])·h_prev[n,d,j] + Δ[n,d]·b[n,j]·s1[n,d]`.
    pub fn ssm_transition(&mut self, h_prev: Var, delta: Var, a: Var, b: Var, s1: Var) -> Result<Var> {
        let (th, td, ta, tb, ts) = (
            self.value(h_prev),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(s1),
        );
        let (n, ds) = (ts.rows(), ts.cols());
        let e = ta.cols();
        if ta.rows() != ds
            || td.rows() != n
            || td.cols() != ds
            || tb.rows() != n
            || tb.cols() != e
            || th.len() != n * ds * e
        {
            return Err(dim_err!(
                "ssm_transition: h {:?}, Δ {:?}, A {:?}, B {:?}, S1 {:?}",
                th.shape(),
                td.shape(),
                ta.shape(),
                tb.shape(),
                ts.shape()
            ));
        }
        let out = ssm_transition_kernel(th.data(), td.data(), ta.data(), tb.data(), ts.data(), n, ds, e);
        let rg = self.any_grad(&[h_prev, delta, a, b, s1]);
        Ok(self.push(
            Tensor::matrix(n, ds * e, out),
            Op::SsmTransition {
                h_prev,
                delta,
                a,
                b,
                s1,
            },
            rg,
        ))
    }

    /// State readout `S[n,d] = Σ_j c[n,j]·h[n,d,j] + D[d]·s1[n,d]`.
    pub fn ssm_readout(&mut self, h: Var, c: Var, d: Var, s1: Var) -> Result<Var> {
        let (th, tc, tdd, ts) = (self.value(h), self.value(c), self.value(d), self.value(s1));
        let (n, ds) = (ts.rows(), ts.cols());
        let e = tc.cols();
        if tc.rows() != n || tdd.len() != ds || th.len() != n * ds * e {
            return Err(dim_err!(
                "ssm_readout: h {:?}, C {:?}, D {:?}, S1 {:?}",
                th.shape(),
                tc.shape(),
                tdd.shape(),
                ts.shape()
            ));
        }
        let out = ssm_readout_kernel(th.data(), tc.data(), tdd.data(), ts.data(), n, ds, e);
        let rg = self.any_grad(&[h, c, d, s1]);
        Ok(self.push(Tensor::matrix(n, ds, out), Op::SsmReadout { h, c, d, s1 }, rg))
    }

    /// Penalty-reduced focal loss on sigmoid logits against a soft heatmap.
    ///
    /// Cells with target exactly 1 are positives; the sum is divided by the
    /// positive count (at least one).
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
        let z = self.value(logits);
        same_len(z, target, "focal_loss")?;
        let npos = target.data().iter().filter(|&&y| y == 1.0).count().max(1) as f64;
        let mut total = 0.0;
        for (&zi, &y) in z.data().iter().zip(target.data()) {
            total += focal_term(zi, y, alpha, beta).0;
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / npos),
            Op::FocalLoss {
                logits,
                target: target.clone(),
                alpha,
                beta,
            },
            rg,
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let z = self.value(logits);
        if class >= z.len() {
            return Err(dim_err!("cross_entropy: class {class} of {}", z.len()));
        }
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[class];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, class }, rg))
    }

    /// `1 − GIoU` between a `1 × 4` predicted `(cx, cy, w, h)` and a fixed box.
    pub fn giou_loss(&mut self, pred: Var, gt: [f64; 4]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != 4 {
            return Err(dim_err!("giou_loss: prediction {:?}", p.shape()));
        }
        let (loss, _) = giou_loss_and_grad(p.data(), &gt);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::GiouLoss { pred, gt }, rg))
    }

    /// Mean absolute error over the four box coordinates.
    pub fn l1_loss(&mut self, pred: Var, gt: [f64; 4]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != 4 {
            return Err(dim_err!("l1_loss: prediction {:?}", p.shape()));
        }
        let loss = p.data().iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let rg = self.any_grad(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::L1Loss { pred, gt }, rg))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(dim_err!("backward needs a scalar, got {:?}", lv.shape()));
        }
        lv.check_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64], s: f64) {
        if let Some(slot) = self.grad_slot(grads, v) {
            for (o, x) in slot.data_mut().iter_mut().zip(g) {
                *o += s * x;
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if let Some(slot) = self.grad_slot(grads, v) {
            for (i, (o, &x)) in slot.data_mut().iter_mut().zip(g.data()).enumerate() {
                *o += f(i, x);
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, None, g, grads),
            Op::Linear { x, w, b } => self.backward_matmul(*x, *w, *b, g, grads),
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g.data(), 1.0);
                self.acc_scaled(grads, *b, g.data(), 1.0);
            }
            Op::AddRow(x, row) => {
                self.acc_scaled(grads, *x, g.data(), 1.0);
                let d = g.cols();
                if let Some(slot) = self.grad_slot(grads, *row) {
                    for r in g.data().chunks(d.max(1)) {
                        for (o, v) in slot.data_mut().iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc_map(grads, *a, g, |k, x| x * tb.data()[k]);
                self.acc_map(grads, *b, g, |k, x| x * ta.data()[k]);
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let d = tx.cols().max(1);
                self.acc_map(grads, *x, g, |k, v| v * tr.data()[k % d]);
                if let Some(slot) = self.grad_slot(grads, *row) {
                    for (k, (&gv, &xv)) in g.data().iter().zip(tx.data()).enumerate() {
                        slot.data_mut()[k % d] += gv * xv;
                    }
                }
            }
            Op::Scale(a, s) => self.acc_scaled(grads, *a, g.data(), *s),
            Op::Silu(a) => {
                let ta = self.value(*a);
                self.acc_map(grads, *a, g, |k, x| {
                    let z = ta.data()[k];
                    let s = sigmoid_scalar(z);
                    x * s * (1.0 + z * (1.0 - s))
                });
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |k, x| {
                let y = out.data()[k];
                x * y * (1.0 - y)
            }),
            Op::Softplus(a) => {
                let ta = self.value(*a);
                self.acc_map(grads, *a, g, |k, x| {
                    let z = ta.data()[k];
                    if z > SOFTPLUS_LINEAR_CUTOFF {
                        x
                    } else {
                        x * sigmoid_scalar(z)
                    }
                });
            }
            Op::Exp(a) => self.acc_map(grads, *a, g, |k, x| x * out.data()[k]),
            Op::RmsNorm { x, gain, eps } => self.backward_rms_norm(*x, *gain, *eps, g, grads),
            Op::Attention(op) => self.backward_attention(op, g, grads),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_scaled(grads, p, &g.data()[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let width = g.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(slot) = self.grad_slot(grads, p) {
                        for r in 0..g.rows() {
                            let src = &g.data()[r * width + col..r * width + col + c];
                            for (o, v) in slot.row_mut(r).iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = g.cols();
                if let Some(slot) = self.grad_slot(grads, *x) {
                    let dst = &mut slot.data_mut()[start * c..start * c + g.len()];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = g.cols();
                if let Some(slot) = self.grad_slot(grads, *x) {
                    for r in 0..g.rows() {
                        let dst = &mut slot.row_mut(r)[*start..start + len];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, v) in slot.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows().max(1);
                let inv = 1.0 / n as f64;
                let c = g.len().max(1);
                if let Some(slot) = self.grad_slot(grads, *x) {
                    for (k, o) in slot.data_mut().iter_mut().enumerate() {
                        *o += g.data()[k % c] * inv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                if let Some(slot) = self.grad_slot(grads, *x) {
                    slot.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::DepthwiseConv { x, kernel } => self.backward_conv(*x, *kernel, g, grads),
            Op::SsmTransition {
                h_prev,
                delta,
                a,
                b,
                s1,
            } => self.backward_ssm_transition([*h_prev, *delta, *a, *b, *s1], g, grads),
            Op::SsmReadout { h, c, d, s1 } => self.backward_ssm_readout([*h, *c, *d, *s1], g, grads),
            Op::FocalLoss {
                logits,
                target,
                alpha,
                beta,
            } => {
                let z = self.value(*logits);
                let npos = target.data().iter().filter(|&&y| y == 1.0).count().max(1) as f64;
                let gv = g.data()[0] / npos;
                self.acc_map(grads, *logits, z, |k, zk| {
                    gv * focal_term(zk, target.data()[k], *alpha, *beta).1
                });
            }
            Op::CrossEntropy { logits, class } => {
                let mut p = self.value(*logits).data().to_vec();
                softmax_row(&mut p);
                p[*class] -= 1.0;
                self.acc_scaled(grads, *logits, &p, g.data()[0]);
            }
            Op::GiouLoss { pred, gt } => {
                let (_, d) = giou_loss_and_grad(self.value(*pred).data(), gt);
                self.acc_scaled(grads, *pred, &d, g.data()[0]);
            }
            Op::L1Loss { pred, gt } => {
                let p = self.value(*pred);
                let d: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(gt)
                    .map(|(a, b)| {
                        let s = a - b;
                        if s > 0.0 {
                            0.25
                        } else if s < 0.0 {
                            -0.25
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc_scaled(grads, *pred, &d, g.data()[0]);
            }
        }
    }

    fn backward_matmul(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        if let Some(slot) = self.grad_slot(grads, x) {
            matmul_nt_acc(g.data(), tw.data(), slot.data_mut(), m, n, k);
        }
        if let Some(slot) = self.grad_slot(grads, w) {
            matmul_tn_acc(tx.data(), g.data(), slot.data_mut(), m, k, n);
        }
        if let Some(b) = b {
            if let Some(slot) = self.grad_slot(grads, b) {
                for r in g.data().chunks(n.max(1)) {
                    for (o, v) in slot.data_mut().iter_mut().zip(r) {
                        *o += v;
                    }
                }
            }
        }
    }

    fn backward_rms_norm(&self, x: Var, gain: Var, eps: f64, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        let rows = tx.rows();
        let inv: Vec<f64> = (0..rows).map(|r| inv_rms(tx.row(r), eps)).collect();
        if let Some(slot) = self.grad_slot(grads, x) {
            for r in 0..rows {
                let (xr, gr, ri) = (tx.row(r), g.row(r), inv[r]);
                let dot: f64 = (0..d).map(|c| tg.data()[c] * gr[c] * xr[c]).sum();
                let coef = ri * ri * ri * dot / d as f64;
                for (c, o) in slot.row_mut(r).iter_mut().enumerate() {
                    *o += ri * tg.data()[c] * gr[c] - xr[c] * coef;
                }
            }
        }
        if let Some(slot) = self.grad_slot(grads, gain) {
            for r in 0..rows {
                let (xr, gr, ri) = (tx.row(r), g.row(r), inv[r]);
                for (c, o) in slot.data_mut().iter_mut().enumerate() {
                    *o += gr[c] * xr[c] * ri;
                }
            }
        }
    }

    fn backward_attention(&self, op: &AttentionOp, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tq, tk, tv) = (self.value(op.q), self.value(op.k), self.value(op.v));
        let (nq, d, nk) = (tq.rows(), tq.cols(), tk.rows());
        let heads = op.heads;
        let dh = d / heads;
        let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());

        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dlogit = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let prow = &op.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let grow = &gd[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..nk {
                    let vrow = &vd[j * d + off..j * d + off + dh];
                    let dvrow = &mut dv[j * d + off..j * d + off + dh];
                    let mut dp = 0.0;
                    for c in 0..dh {
                        dvrow[c] += prow[j] * grow[c];
                        dp += grow[c] * vrow[c];
                    }
                    dlogit[j] = dp;
                    dot += dp * prow[j];
                }
                for j in 0..nk {
                    let dl = prow[j] * (dlogit[j] - dot) * op.scale;
                    if dl == 0.0 {
                        continue;
                    }
                    let krow = &kd[j * d + off..j * d + off + dh];
                    let qrow = &qd[i * d + off..i * d + off + dh];
                    for c in 0..dh {
                        dq[i * d + off + c] += dl * krow[c];
                        dk[j * d + off + c] += dl * qrow[c];
                    }
                }
            }
        }
        self.acc_scaled(grads, op.q, &dq, 1.0);
        self.acc_scaled(grads, op.k, &dk, 1.0);
        self.acc_scaled(grads, op.v, &dv, 1.0);
    }

    fn backward_conv(&self, x: Var, kernel: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (n, d, w) = (tx.rows(), tx.cols(), tk.rows());
        let gd = g.data();
        if let Some(slot) = self.grad_slot(grads, x) {
            let dx = slot.data_mut();
            for row in 0..n {
                for t in 0..w {
                    let Some(src) = (row + t).checked_sub(w - 1) else { continue };
                    for c in 0..d {
                        dx[src * d + c] += tk.data()[t * d + c] * gd[row * d + c];
                    }
                }
            }
        }
        if let Some(slot) = self.grad_slot(grads, kernel) {
            let dk = slot.data_mut();
            for row in 0..n {
                for t in 0..w {
                    let Some(src) = (row + t).checked_sub(w - 1) else { continue };
                    for c in 0..d {
                        dk[t * d + c] += tx.data()[src * d + c] * gd[row * d + c];
                    }
                }
            }
        }
    }

    fn backward_ssm_transition(&self, vars: [Var; 5], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let [h_prev, delta, a, b, s1] = vars;
        let (th, td, ta, tb, ts) = (
            self.value(h_prev),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(s1),
        );
        let (n, ds, e) = (ts.rows(), ts.cols(), ta.cols());
        let gd = g.data();
        let mut dh = vec![0.0; n * ds * e];
        let mut ddelta = vec![0.0; n * ds];
        let mut da = vec![0.0; ds * e];
        let mut db = vec![0.0; n * e];
        let mut ds1 = vec![0.0; n * ds];
        for t in 0..n {
            for c in 0..ds {
                let dt = td.data()[t * ds + c];
                let x = ts.data()[t * ds + c];
                let base = (t * ds + c) * e;
                for j in 0..e {
                    let av = ta.data()[c * e + j];
                    let abar = (dt * av).exp();
                    let hp = th.data()[base + j];
                    let bv = tb.data()[t * e + j];
                    let gv = gd[base + j];
                    dh[base + j] = gv * abar;
                    ddelta[t * ds + c] += gv * (av * abar * hp + bv * x);
                    da[c * e + j] += gv * abar * dt * hp;
                    db[t * e + j] += gv * dt * x;
                    ds1[t * ds + c] += gv * dt * bv;
                }
            }
        }
        self.acc_scaled(grads, h_prev, &dh, 1.0);
        self.acc_scaled(grads, delta, &ddelta, 1.0);
        self.acc_scaled(grads, a, &da, 1.0);
        self.acc_scaled(grads, b, &db, 1.0);
        self.acc_scaled(grads, s1, &ds1, 1.0);
    }

    fn backward_ssm_readout(&self, vars: [Var; 4], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let [h, c, d, s1] = vars;
        let (th, tc, tdd, ts) = (self.value(h), self.value(c), self.value(d), self.value(s1));
        let (n, ds, e) = (ts.rows(), ts.cols(), tc.cols());
        let gd = g.data();
        let mut dh = vec![0.0; n * ds * e];
        let mut dc = vec![0.0; n * e];
        let mut dd = vec![0.0; ds];
        let mut ds1 = vec![0.0; n * ds];
        for t in 0..n {
            for ch in 0..ds {
                let gv = gd[t * ds + ch];
                let base = (t * ds + ch) * e;
                for j in 0..e {
                    dh[base + j] = gv * tc.data()[t * e + j];
                    dc[t * e + j] += gv * th.data()[base + j];
                }
                dd[ch] += gv * ts.data()[t * ds + ch];
                ds1[t * ds + ch] = gv * tdd.data()[ch];
            }
        }
        self.acc_scaled(grads, h, &dh, 1.0);
        self.acc_scaled(grads, c, &dc, 1.0);
        self.acc_scaled(grads, d, &dd, 1.0);
        self.acc_scaled(grads, s1, &ds1, 1.0);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ssm_transition_kernel(
    h_prev: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    s1: &[f64],
    n: usize,
    ds: usize,
    e: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * ds * e];
    for t in 0..n {
        for c in 0..ds {
            let dt = delta[t * ds + c];
            let x = s1[t * ds + c];
            let base = (t * ds + c) * e;
            for j in 0..e {
                let abar = (dt * a[c * e + j]).exp();
                out[base + j] = abar * h_prev[base + j] + dt * b[t * e + j] * x;
            }
        }
    }
    out
}

pub(crate) fn ssm_readout_kernel(
    h: &[f64],
    c: &[f64],
    d: &[f64],
    s1: &[f64],
    n: usize,
    ds: usize,
    e: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * ds];
    for t in 0..n {
        let crow = &c[t * e..(t + 1) * e];
        for ch in 0..ds {
            let base = (t * ds + ch) * e;
            let mut s = 0.0;
            for (cv, hv) in crow.iter().zip(&h[base..base + e]) {
                s += cv * hv;
            }
            out[t * ds + ch] = s + d[ch] * s1[t * ds + ch];
        }
    }
    out
}

/// Focal loss term and its derivative w.r.t. the logit.
fn focal_term(z: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let p = sigmoid_scalar(z);
    let log_p = -softplus_scalar(-z);
    let log_1mp = -softplus_scalar(z);
    if y == 1.0 {
        let w = (1.0 - p).powf(alpha);
        let loss = -w * log_p;
        let grad = w * (alpha * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let w = (1.0 - y).powf(beta);
        let pa = p.powf(alpha);
        let loss = -w * pa * log_1mp;
        let grad = -w * pa * (alpha * (1.0 - p) * log_1mp - p);
        (loss, grad)
    }
}

/// `1 − GIoU` for `(cx, cy, w, h)` boxes and its gradient w.r.t. the prediction.
pub(crate) fn giou_loss_and_grad(p: &[f64], gt: &[f64; 4]) -> (f64, [f64; 4]) {
    let (x1, x2) = (p[0] - p[2] / 2.0, p[0] + p[2] / 2.0);
    let (y1, y2) = (p[1] - p[3] / 2.0, p[1] + p[3] / 2.0);
    let (gx1, gx2) = (gt[0] - gt[2] / 2.0, gt[0] + gt[2] / 2.0);
    let (gy1, gy2) = (gt[1] - gt[3] / 2.0, gt[1] + gt[3] / 2.0);

    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area = pw * ph;
    let garea = (gx2 - gx1) * (gy2 - gy1);
    let union = area + garea - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let enclose = cw * ch;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let loss = 2.0 - iou - if enclose > 0.0 { union / enclose } else { 0.0 };

    // d/d(x1, x2, y1, y2)
    let on_w = iw_raw > 0.0;
    let on_h = ih_raw > 0.0;
    let d_iw = [
        if on_w && x1 > gx1 { -1.0 } else { 0.0 },
        if on_w && x2 < gx2 { 1.0 } else { 0.0 },
    ];
    let d_ih = [
        if on_h && y1 > gy1 { -1.0 } else { 0.0 },
        if on_h && y2 < gy2 { 1.0 } else { 0.0 },
    ];
    let d_inter = [d_iw[0] * ih, d_iw[1] * ih, d_ih[0] * iw, d_ih[1] * iw];
    let d_area = [-ph, ph, -pw, pw];
    let d_cw = [if x1 < gx1 { -1.0 } else { 0.0 }, if x2 > gx2 { 1.0 } else { 0.0 }];
    let d_ch = [if y1 < gy1 { -1.0 } else { 0.0 }, if y2 > gy2 { 1.0 } else { 0.0 }];
    let d_enc = [d_cw[0] * ch, d_cw[1] * ch, d_ch[0] * cw, d_ch[1] * cw];

    let mut dc = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = if union > 0.0 {
            (d_inter[k] * union - inter * d_union) / (union * union)
        } else {
            0.0
        };
        let d_ratio = if enclose > 0.0 {
            (d_union * enclose - union * d_enc[k]) / (enclose * enclose)
        } else {
            0.0
        };
        dc[k] = -d_iou - d_ratio;
    }
    let grad = [
        dc[0] + dc[1],
        dc[2] + dc[3],
        (dc[1] - dc[0]) / 2.0,
        (dc[3] - dc[2]) / 2.0,
    ];
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, SeededRng};

    /// Builds a scalar from `build` applied to graph inputs and compares the
    /// analytic gradient w.r.t. every input with central differences.
    fn check_inputs(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let store = ParamStore::new();
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0]
        };
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let mut numeric = Tensor::zeros(inputs[k].shape());
            let h = 1e-6;
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                numeric.data_mut()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "input {k}: rel err {err}\n{analytic:?}\n{numeric:?}");
        }
    }

    fn rnd(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        rng.normal_tensor(&[r, c], 1.0)
    }

    #[test]
    fn grad_linear_activations() {
        let mut rng = SeededRng::new(1);
        let inputs = vec![rnd(&mut rng, 3, 4), rnd(&mut rng, 4, 5), rnd(&mut rng, 1, 5), rnd(&mut rng, 3, 5)];
        check_inputs(inputs, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let a = g.silu(y);
            let b = g.sigmoid(a);
            let c = g.softplus(b);
            let d = g.mul(c, v[3]).unwrap();
            let e = g.exp(d);
            let f = g.scale(e, 0.3);
            g.sum(f)
        });
    }

    #[test]
    fn grad_rms_norm_and_rows() {
        let mut rng = SeededRng::new(2);
        let inputs = vec![rnd(&mut rng, 3, 4), rnd(&mut rng, 1, 4), rnd(&mut rng, 3, 4), rnd(&mut rng, 1, 4)];
        check_inputs(inputs, |g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-6).unwrap();
            let y = g.add_row(y, v[3]).unwrap();
            let y = g.mul_row(y, v[3]).unwrap();
            let z = g.mul(y, v[2]).unwrap();
            let m = g.mean_rows(z);
            let s = g.slice_cols(m, 1, 2).unwrap();
            let r = g.gather_rows(z, &[2, 0, 2]).unwrap();
            let rs = g.slice_rows(r, 1, 2).unwrap();
            let cat = g.concat_rows(&[rs, z]).unwrap();
            let cc = g.concat_cols(&[cat, cat]).unwrap();
            let a = g.sum(s);
            let b = g.sum(cc);
            let b = g.scale(b, 0.1);
            let ab = g.mul(a, b).unwrap();
            g.add(ab, a).unwrap()
        });
    }

    #[test]
    fn grad_attention_with_bias() {
        let mut rng = SeededRng::new(3);
        let bias = rnd(&mut rng, 2, 5);
        let inputs = vec![rnd(&mut rng, 3, 4), rnd(&mut rng, 5, 4), rnd(&mut rng, 5, 4), rnd(&mut rng, 3, 4)];
        check_inputs(inputs, move |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, 0.7, Some(&bias)).unwrap();
            let m = g.mul(a, v[3]).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn grad_conv_and_ssm() {
        let mut rng = SeededRng::new(4);
        let (n, ds, e) = (3, 2, 3);
        let inputs = vec![
            rnd(&mut rng, n, ds * e),                                 // h_prev
            rng.uniform_tensor(&[n, ds], 0.1, 1.0),                   // delta
            rng.uniform_tensor(&[ds, e], -2.0, -0.1),                 // A
            rnd(&mut rng, n, e),                                      // B
            rnd(&mut rng, n, ds),                                     // S1
            rnd(&mut rng, n, e),                                      // C
            rnd(&mut rng, 1, ds),                                     // D
            rnd(&mut rng, 2, ds),                                     // conv kernel
        ];
        check_inputs(inputs, |g, v| {
            let x = g.depthwise_conv(v[4], v[7]).unwrap();
            let h = g.ssm_transition(v[0], v[1], v[2], v[3], x).unwrap();
            let s = g.ssm_readout(h, v[5], v[6], x).unwrap();
            let hs = g.sum(h);
            let ss = g.sum(s);
            let sq = g.mul(ss, ss).unwrap();
            g.add(hs, sq).unwrap()
        });
    }

    #[test]
    fn grad_losses() {
        let mut rng = SeededRng::new(5);
        let mut target = rng.uniform_tensor(&[6, 1], 0.0, 0.9);
        target.data_mut()[2] = 1.0;
        let inputs = vec![rnd(&mut rng, 6, 1), rnd(&mut rng, 1, 5)];
        check_inputs(inputs, move |g, v| {
            let f = g.focal_loss(v[0], &target, 2.0, 4.0).unwrap();
            let c = g.cross_entropy(v[1], 3).unwrap();
            g.add(f, c).unwrap()
        });
        // Overlapping and disjoint box configurations.
        for gt in [[0.5, 0.45, 0.3, 0.2], [0.9, 0.9, 0.1, 0.1]] {
            let pred = Tensor::matrix(1, 4, vec![0.52, 0.5, 0.25, 0.31]);
            check_inputs(vec![pred], move |g, v| {
                let a = g.giou_loss(v[0], gt).unwrap();
                let b = g.l1_loss(v[0], gt).unwrap();
                g.add(a, b).unwrap()
            });
        }
    }

    #[test]
    fn frozen_params_receive_no_grad() {
        let mut store = ParamStore::new();
        let frozen = store.add("w", Tensor::full(&[2, 2], 0.5), false).unwrap();
        let train = store.add("b", Tensor::full(&[1, 2], 0.1), true).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[3, 2], 1.0));
        let (w, b) = (g.param(frozen), g.param(train));
        let y = g.linear(x, w, Some(b)).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.param(frozen).is_none());
        assert_eq!(grads.param(train).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(9);
        let w = store.add("w", rng.normal_tensor(&[3, 2], 1.0), true).unwrap();
        let x = rng.normal_tensor(&[4, 3], 1.0);
        let f = |s: &ParamStore| -> crate::error::Result<f64> {
            let mut g = Graph::new(s);
            let xv = g.constant(x.clone());
            let wv = g.param(w);
            let y = g.matmul(xv, wv)?;
            let y = g.silu(y);
            let out = g.sum(y);
            Ok(g.value(out).data()[0])
        };
        let analytic = {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let wv = g.param(w);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.silu(y);
            let out = g.sum(y);
            g.backward(out).unwrap().param(w).unwrap().clone()
        };
        let numeric = finite_diff_grad(&mut store, &[w], 1e-5, f).unwrap();
        assert!(relative_error(&analytic, &numeric[0]) < 1e-8);
    }
}
