//! Reverse-mode automatic differentiation on a flat tape of 2-D arrays.
//!
//! Every operation appends a node holding its output value; `backward`
//! walks the tape in reverse and accumulates gradients into every node that
//! depends on a trainable leaf. Children always precede their parents on
//! the tape, so one reverse sweep suffices.
//!
//! Row layout convention for batched sequence data: row `b * seq_len + i`
//! holds position `i` of example `b`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SoftmaxGroups {
        x: NodeId,
        groups: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    AddSequenceBias {
        x: NodeId,
        bias: NodeId,
        seq_len: usize,
    },
    BatchStandardize {
        x: NodeId,
        mean: f64,
        var: f64,
    },
    NormalizeFixed {
        x: NodeId,
        var: f64,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        /// Softmax weights saved at forward time, `(batch * heads * seq_len,
        /// seq_len)` with blocks ordered by example then head.
        probs: Array2<T>,
    },
    NllSum {
        probs: NodeId,
        labels: Vec<usize>,
        floor: T,
    },
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    grad: Option<Array2<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Numerical floor added to variances before taking square roots.
pub const NORM_EPS: f64 = 1e-5;

/// A tape of array-valued nodes supporting one reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to this node, if
    /// the node participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Batch statistics recorded by a `batch_standardize` node.
    pub fn standardize_stats(&self, id: NodeId) -> Option<(f64, f64)> {
        match self.nodes[id.0].op {
            Op::BatchStandardize { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Inserts a trainable or constant input node.
    pub fn leaf(&mut self, value: Array2<T>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    /// Inserts a constant input node.
    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Affine map `x @ w + b` with `x: (n, d_in)`, `w: (d_in, d_out)` and
    /// `b: (1, d_out)` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.dot(&self.nodes[w.0].value);
        let bias = &self.nodes[b.0].value;
        for mut row in value.rows_mut() {
            row.zip_mut_with(&bias.row(0), |v, &u| *v = *v + u);
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(lo).min(hi));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    /// Row-wise layer normalization with learned scale and shift, both of
    /// shape `(1, d)`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let (n, d) = xv.dim();
        let mut value = Array2::zeros((n, d));
        for r in 0..n {
            let row = xv.row(r);
            let (mean, inv_std) = row_moments(&row.to_owned());
            for c in 0..d {
                value[(r, c)] = (row[c] - mean) * inv_std * gv[(0, c)] + bv[(0, c)];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta }, rg)
    }

    /// Splits each row into `groups` equal column segments and applies a
    /// numerically stable softmax within each segment.
    pub fn softmax_groups(&mut self, x: NodeId, groups: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.dim();
        assert!(groups > 0 && d % groups == 0, "columns not divisible into groups");
        let seg = d / groups;
        let mut value = Array2::zeros((n, d));
        for r in 0..n {
            for g in 0..groups {
                let lo = g * seg;
                softmax_into(
                    &xv.slice(s![r, lo..lo + seg]).to_owned(),
                    &mut value.slice_mut(s![r, lo..lo + seg]),
                );
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SoftmaxGroups { x, groups }, rg)
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Array2::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.nrows(), n, "row mismatch in column concat");
            value.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[x.0].value.slice(s![.., start..start + len]).to_owned();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SliceCols { x, start, len }, rg)
    }

    /// Adds a per-position bias of shape `(seq_len, d)` to a batch of
    /// sequences laid out example-major.
    pub fn add_sequence_bias(&mut self, x: NodeId, bias: NodeId, seq_len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let (n, d) = xv.dim();
        assert_eq!(bv.dim(), (seq_len, d), "bias shape mismatch");
        assert_eq!(n % seq_len, 0, "rows not a multiple of seq_len");
        let mut value = xv.clone();
        for r in 0..n {
            let i = r % seq_len;
            value.row_mut(r).zip_mut_with(&bv.row(i), |v, &u| *v = *v + u);
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(value, Op::AddSequenceBias { x, bias, seq_len }, rg)
    }

    /// Standardizes all entries to zero mean and unit variance using batch
    /// statistics computed at f64; the statistics are differentiated
    /// through and recorded on the node.
    pub fn batch_standardize(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = xv.len() as f64;
        let mean = xv.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = xv.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv_std = T::from_f64(1.0 / (var + NORM_EPS).sqrt());
        let mean_t = T::from_f64(mean);
        let value = xv.mapv(|v| (v - mean_t) * inv_std);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::BatchStandardize { x, mean, var }, rg)
    }

    /// Standardizes with externally supplied statistics; only the input is
    /// differentiated through.
    pub fn normalize_fixed(&mut self, x: NodeId, mean: f64, var: f64) -> NodeId {
        let inv_std = T::from_f64(1.0 / (var + NORM_EPS).sqrt());
        let mean_t = T::from_f64(mean);
        let value = self.nodes[x.0].value.mapv(|v| (v - mean_t) * inv_std);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::NormalizeFixed { x, var }, rg)
    }

    /// Multi-head scaled dot-product attention over example-major batches.
    ///
    /// `q`, `k`, `v` have shape `(batch * seq_len, d)` with `d` split evenly
    /// across `heads`; every position attends to all positions of the same
    /// example.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, seq_len: usize) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (n, d) = qv.dim();
        assert_eq!(kv.dim(), (n, d));
        assert_eq!(vv.dim(), (n, d));
        assert!(heads > 0 && d % heads == 0, "model width not divisible by heads");
        assert_eq!(n % seq_len, 0, "rows not a multiple of seq_len");
        let dh = d / heads;
        let batch = n / seq_len;
        let scl = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut value = Array2::zeros((n, d));
        let mut probs = Array2::zeros((batch * heads * seq_len, seq_len));
        for b in 0..batch {
            let rows = b * seq_len..(b + 1) * seq_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qs.dot(&ks.t());
                scores.mapv_inplace(|v| v * scl);
                let p0 = (b * heads + h) * seq_len;
                for i in 0..seq_len {
                    softmax_into(
                        &scores.row(i).to_owned(),
                        &mut probs.slice_mut(s![p0 + i, ..]),
                    );
                }
                let p = probs.slice(s![p0..p0 + seq_len, ..]);
                let out = p.dot(&vs);
                value.slice_mut(s![rows.clone(), cols.clone()]).assign(&out);
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        )
    }

    /// Sum of `-ln(max(probs[i, labels[i]], floor))` over all rows, as a
    /// `(1, 1)` node.
    pub fn nll_sum(&mut self, probs: NodeId, labels: &[usize], floor: T) -> NodeId {
        let pv = &self.nodes[probs.0].value;
        assert_eq!(pv.nrows(), labels.len(), "one label per row required");
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < pv.ncols(), "label out of range");
            total = total - pv[(r, y)].max(floor).ln();
        }
        let value = Array2::from_elem((1, 1), total);
        let rg = self.any_grad(&[probs]);
        self.push(
            value,
            Op::NllSum {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        )
    }

    /// Sum of all entries as a `(1, 1)` node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x.0].value.iter().fold(T::zero(), |acc, &v| acc + v);
        let value = Array2::from_elem((1, 1), total);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Runs one reverse sweep from a scalar root, filling gradients for all
    /// nodes that require them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be a (1, 1) scalar, got {:?}",
                self.nodes[root.0].value.dim()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any trainable leaf".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(Array2::zeros(node.value.dim()))
            } else {
                None
            };
        }
        self.nodes[root.0].grad = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gy) = node.grad.as_ref() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(before, *a, gy);
                    accumulate(before, *b, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(before, *a, gy);
                    let neg = gy.mapv(|v| T::zero() - v);
                    accumulate(before, *b, &neg);
                }
                Op::Scale(a, factor) => {
                    let d = gy.mapv(|v| v * *factor);
                    accumulate(before, *a, &d);
                }
                Op::Linear { x, w, b } => {
                    let xv = &before[x.0].value;
                    let wv = &before[w.0].value;
                    let dx = gy.dot(&wv.t());
                    let dw = xv.t().dot(gy);
                    let db = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(before, *x, &dx);
                    accumulate(before, *w, &dw);
                    accumulate(before, *b, &db);
                }
                Op::MatMul(a, b) => {
                    let av = &before[a.0].value;
                    let bv = &before[b.0].value;
                    let da = gy.dot(&bv.t());
                    let db = av.t().dot(gy);
                    accumulate(before, *a, &da);
                    accumulate(before, *b, &db);
                }
                Op::Relu(x) => {
                    let xv = &before[x.0].value;
                    let mut d = gy.clone();
                    d.zip_mut_with(xv, |g, &v| {
                        if v <= T::zero() {
                            *g = T::zero()
                        }
                    });
                    accumulate(before, *x, &d);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &before[x.0].value;
                    let mut d = gy.clone();
                    d.zip_mut_with(xv, |g, &v| {
                        if v < *lo || v > *hi {
                            *g = T::zero()
                        }
                    });
                    accumulate(before, *x, &d);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = &before[x.0].value;
                    let gv = &before[gamma.0].value;
                    let (n, d) = xv.dim();
                    let mut dx = Array2::zeros((n, d));
                    let mut dgamma = Array2::zeros((1, d));
                    let mut dbeta = Array2::zeros((1, d));
                    let inv_d = T::from_f64(1.0 / d as f64);
                    for r in 0..n {
                        let row = xv.row(r).to_owned();
                        let (mean, inv_std) = row_moments(&row);
                        let xhat: Vec<T> =
                            row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<T> = (0..d)
                            .map(|c| gy[(r, c)] * gv[(0, c)])
                            .collect();
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            m1 = m1 + dxhat[c];
                            m2 = m2 + dxhat[c] * xhat[c];
                            dgamma[(0, c)] = dgamma[(0, c)] + gy[(r, c)] * xhat[c];
                            dbeta[(0, c)] = dbeta[(0, c)] + gy[(r, c)];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for c in 0..d {
                            dx[(r, c)] = inv_std * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    accumulate(before, *x, &dx);
                    accumulate(before, *gamma, &dgamma);
                    accumulate(before, *beta, &dbeta);
                }
                Op::SoftmaxGroups { x, groups } => {
                    let sv = &node.value;
                    let (n, d) = sv.dim();
                    let seg = d / groups;
                    let mut dx = Array2::zeros((n, d));
                    for r in 0..n {
                        for g in 0..*groups {
                            let lo = g * seg;
                            let mut dot = T::zero();
                            for c in lo..lo + seg {
                                dot = dot + gy[(r, c)] * sv[(r, c)];
                            }
                            for c in lo..lo + seg {
                                dx[(r, c)] = sv[(r, c)] * (gy[(r, c)] - dot);
                            }
                        }
                    }
                    accumulate(before, *x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = before[p.0].value.ncols();
                        let d = gy.slice(s![.., at..at + w]).to_owned();
                        accumulate(before, p, &d);
                        at += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if let Some(gx) = before[x.0].grad.as_mut() {
                        gx.slice_mut(s![.., *start..start + len])
                            .zip_mut_with(gy, |a, &b| *a = *a + b);
                    }
                }
                Op::AddSequenceBias { x, bias, seq_len } => {
                    accumulate(before, *x, gy);
                    if let Some(gb) = before[bias.0].grad.as_mut() {
                        for r in 0..gy.nrows() {
                            gb.row_mut(r % seq_len)
                                .zip_mut_with(&gy.row(r), |a, &b| *a = *a + b);
                        }
                    }
                }
                Op::BatchStandardize { x, mean: _, var } => {
                    let xhat = &node.value;
                    let n = T::from_f64(xhat.len() as f64);
                    let inv_std = T::from_f64(1.0 / (var + NORM_EPS).sqrt());
                    let mut g_mean = T::zero();
                    let mut g_dot = T::zero();
                    for (g, h) in gy.iter().zip(xhat.iter()) {
                        g_mean = g_mean + *g;
                        g_dot = g_dot + *g * *h;
                    }
                    g_mean = g_mean / n;
                    g_dot = g_dot / n;
                    let mut dx = gy.clone();
                    dx.zip_mut_with(xhat, |g, &h| {
                        *g = inv_std * (*g - g_mean - h * g_dot);
                    });
                    accumulate(before, *x, &dx);
                }
                Op::NormalizeFixed { x, var } => {
                    let inv_std = T::from_f64(1.0 / (var + NORM_EPS).sqrt());
                    let d = gy.mapv(|v| v * inv_std);
                    accumulate(before, *x, &d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seq_len,
                    probs,
                } => {
                    let qv = &before[q.0].value;
                    let kv = &before[k.0].value;
                    let vv = &before[v.0].value;
                    let (n, d) = qv.dim();
                    let dh = d / heads;
                    let batch = n / seq_len;
                    let scl = T::from_f64(1.0 / (dh as f64).sqrt());
                    let mut dq = Array2::zeros((n, d));
                    let mut dk = Array2::zeros((n, d));
                    let mut dv = Array2::zeros((n, d));
                    for b in 0..batch {
                        let rows = b * seq_len..(b + 1) * seq_len;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p0 = (b * heads + h) * seq_len;
                            let p = probs.slice(s![p0..p0 + seq_len, ..]);
                            let go = gy.slice(s![rows.clone(), cols.clone()]);
                            let qs = qv.slice(s![rows.clone(), cols.clone()]);
                            let ks = kv.slice(s![rows.clone(), cols.clone()]);
                            let vs = vv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()])
                                .zip_mut_with(&p.t().dot(&go), |a, &b| *a = *a + b);
                            let dp = go.dot(&vs.t());
                            let mut ds = Array2::zeros((*seq_len, *seq_len));
                            for i in 0..*seq_len {
                                let mut dot = T::zero();
                                for j in 0..*seq_len {
                                    dot = dot + dp[(i, j)] * p[(i, j)];
                                }
                                for j in 0..*seq_len {
                                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scl;
                                }
                            }
                            dq.slice_mut(s![rows.clone(), cols.clone()])
                                .zip_mut_with(&ds.dot(&ks), |a, &b| *a = *a + b);
                            dk.slice_mut(s![rows.clone(), cols.clone()])
                                .zip_mut_with(&ds.t().dot(&qs), |a, &b| *a = *a + b);
                        }
                    }
                    accumulate(before, *q, &dq);
                    accumulate(before, *k, &dk);
                    accumulate(before, *v, &dv);
                }
                Op::NllSum {
                    probs,
                    labels,
                    floor,
                } => {
                    let pv = &before[probs.0].value;
                    let g = gy[(0, 0)];
                    let mut dp = Array2::zeros(pv.dim());
                    for (r, &y) in labels.iter().enumerate() {
                        let p = pv[(r, y)];
                        if p >= *floor {
                            dp[(r, y)] = T::zero() - g / p;
                        }
                    }
                    accumulate(before, *probs, &dp);
                }
                Op::SumAll(x) => {
                    let g = gy[(0, 0)];
                    let d = Array2::from_elem(before[x.0].value.dim(), g);
                    accumulate(before, *x, &d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], id: NodeId, delta: &Array2<T>) {
    if let Some(g) = nodes[id.0].grad.as_mut() {
        g.zip_mut_with(delta, |a, &b| *a = *a + b);
    }
}

/// Mean and inverse standard deviation of a row, with the variance floored
/// by [`NORM_EPS`].
fn row_moments<T: Scalar>(row: &ndarray::Array1<T>) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
    let var = row
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / d;
    let inv_std = T::one() / (var + T::from_f64(NORM_EPS)).sqrt();
    (mean, inv_std)
}

/// Numerically stable softmax of `row` written into `out`.
fn softmax_into<T: Scalar, D: ndarray::DataMut<Elem = T>>(
    row: &ndarray::Array1<T>,
    out: &mut ndarray::ArrayBase<D, ndarray::Ix1>,
) {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        total = total + e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}
