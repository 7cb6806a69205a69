//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Values are
//! materialized eagerly; every op checks its output for NaN/Inf.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{KernelError, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    graph: u64,
}

/// Per-feature observation model used by [`Graph::feature_nll_rows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Unit-variance Gaussian on the raw prediction.
    Gaussian,
    /// Bernoulli on a prediction already squashed to a probability.
    Bernoulli,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(String),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    BroadcastRows(usize),
    InterleaveRows(Vec<usize>),
    BlockMean(usize, usize),
    SoftmaxRows(usize),
    BlockAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        block: usize,
        weights: Vec<f64>,
    },
    SumAll(usize),
    WeightedSum(usize, Tensor),
    SqNorm(usize),
    KlRows(usize, usize),
    FeatureNllRows {
        pred: usize,
        target: Tensor,
        kinds: Vec<Likelihood>,
    },
    Bce(usize, Tensor),
    SoftmaxXentRows(usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every node of the graph that produced it.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    param_cache: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(KernelError::Shape(msg))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce_value(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(KernelError::Graph(
                "variable belongs to a different graph".into(),
            ));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.idx].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Const,
        });
        Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    /// Leaf bound to a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
        });
        let v = Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        };
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.cols() != tb.rows() {
            return shape_err(format!("matmul {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let out = gemm(ta, false, tb, false);
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    /// Adds a `[1, m]` bias to every row of an `[n, m]` input.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return shape_err(format!("bias {:?} for input {:?}", tb.shape(), ta.shape()));
        }
        let m = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % m])
            .collect();
        let out = Tensor::from_parts(vec![ta.rows(), m], data);
        self.push(out, Op::AddBias(ia, ib), "add_bias")
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let out = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x + y);
        self.push(out, Op::Add(ia, ib), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "sub")?;
        let out = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x - y);
        self.push(out, Op::Sub(ia, ib), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let out = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x * y);
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        self.push(out, Op::Scale(ia, c), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        self.push(out, Op::Tanh(ia), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(sigmoid);
        self.push(out, Op::Sigmoid(ia), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu(ia), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::exp);
        self.push(out, Op::Exp(ia), "exp")
    }

    /// Horizontal concatenation of inputs sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let rows = match idxs.first() {
            Some(&i) => self.nodes[i].value.rows(),
            None => return shape_err("concat of nothing".into()),
        };
        let mut width = 0;
        for &i in &idxs {
            let t = &self.nodes[i].value;
            if t.rows() != rows {
                return shape_err(format!("concat rows {} vs {}", t.rows(), rows));
            }
            width += t.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        self.push(out, Op::ConcatCols(idxs), "concat_cols")
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if start >= end || end > t.cols() {
            return shape_err(format!("slice {start}..{end} of width {}", t.cols()));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor::from_parts(vec![t.rows(), end - start], data);
        self.push(out, Op::SliceCols(ia, start), "slice_cols")
    }

    /// Repeats a `[1, m]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.rows() != 1 {
            return shape_err(format!(
                "broadcast_rows expects one row, got {:?}",
                t.shape()
            ));
        }
        let data = t.data().repeat(n);
        let out = Tensor::from_parts(vec![n, t.cols()], data);
        self.push(out, Op::BroadcastRows(ia), "broadcast_rows")
    }

    /// Interleaves `k` inputs of shape `[b, m]` into `[b * k, m]`:
    /// output row `i * k + j` is row `i` of input `j`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let first = match idxs.first() {
            Some(&i) => &self.nodes[i].value,
            None => return shape_err("interleave of nothing".into()),
        };
        let (b, m) = (first.rows(), first.cols());
        for &i in &idxs {
            let t = &self.nodes[i].value;
            if t.rows() != b || t.cols() != m {
                return shape_err(format!("interleave {:?} vs [{b}, {m}]", t.shape()));
            }
        }
        let mut data = Vec::with_capacity(b * m * idxs.len());
        for r in 0..b {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        let out = Tensor::from_parts(vec![b * idxs.len(), m], data);
        self.push(out, Op::InterleaveRows(idxs), "interleave_rows")
    }

    /// Mean over consecutive groups of `block` rows.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if block == 0 || !t.rows().is_multiple_of(block) {
            return shape_err(format!(
                "{} rows not divisible into blocks of {block}",
                t.rows()
            ));
        }
        let (groups, m) = (t.rows() / block, t.cols());
        let mut data = vec![0.0; groups * m];
        for r in 0..t.rows() {
            let g = r / block;
            for (o, v) in data[g * m..(g + 1) * m].iter_mut().zip(t.row_slice(r)) {
                *o += v / block as f64;
            }
        }
        let out = Tensor::from_parts(vec![groups, m], data);
        self.push(out, Op::BlockMean(ia, block), "block_mean")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            softmax_into(t.row_slice(r), &mut data);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows(ia), "softmax_rows")
    }

    /// Scaled dot-product attention restricted to consecutive blocks of
    /// `block` rows, split into `heads` column groups.
    ///
    /// `q`, `k`, `v` are `[n_blocks * block, d]` with `d % heads == 0`.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        self.same_shape(iq, ik, "attention q/k")?;
        self.same_shape(iq, iv, "attention q/v")?;
        let (tq, tk, tv) = (
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
        );
        let (rows, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(KernelError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if block == 0 || rows % block != 0 {
            return shape_err(format!("{rows} rows not divisible into blocks of {block}"));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let n_blocks = rows / block;
        let mut weights = vec![0.0; n_blocks * heads * block * block];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; block];
        let mut probs = Vec::with_capacity(block);
        for bi in 0..n_blocks {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..block {
                    let qi = &tq.row_slice(bi * block + i)[c0..c0 + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &tk.row_slice(bi * block + j)[c0..c0 + dh];
                        *s = dot(qi, kj) * inv;
                    }
                    probs.clear();
                    softmax_into(&scores, &mut probs);
                    let w_off = ((bi * heads + h) * block + i) * block;
                    weights[w_off..w_off + block].copy_from_slice(&probs);
                    let o_row = (bi * block + i) * d + c0;
                    for (j, &p) in probs.iter().enumerate() {
                        let vj = &tv.row_slice(bi * block + j)[c0..c0 + dh];
                        for (o, x) in out[o_row..o_row + dh].iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        self.push(
            out,
            Op::BlockAttention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                block,
                weights,
            },
            "block_attention",
        )
    }

    /// Attention weights recorded by a [`Graph::block_attention`] node, laid
    /// out as `[block_index][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.idx)?.op {
            Op::BlockAttention { weights, .. } if v.graph == self.id => Some(weights),
            _ => None,
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        self.push(
            Tensor::from_parts(vec![1, 1], vec![s]),
            Op::SumAll(ia),
            "sum_all",
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return shape_err("mean of empty tensor".into());
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum(w ⊙ a)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.shape() != weights.shape() {
            return shape_err(format!("weights {:?} for {:?}", weights.shape(), t.shape()));
        }
        let s = dot(t.data(), weights.data());
        self.push(
            Tensor::from_parts(vec![1, 1], vec![s]),
            Op::WeightedSum(ia, weights),
            "weighted_sum",
        )
    }

    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.sq_norm();
        self.push(
            Tensor::from_parts(vec![1, 1], vec![s]),
            Op::SqNorm(ia),
            "sq_norm",
        )
    }

    /// Per-row `KL(N(mu, exp(logvar)) || N(0, I))`, shape `[n, 1]`.
    pub fn kl_rows(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (im, il) = (self.idx(mu)?, self.idx(logvar)?);
        self.same_shape(im, il, "kl")?;
        let (tm, tl) = (&self.nodes[im].value, &self.nodes[il].value);
        let data = (0..tm.rows())
            .map(|r| {
                0.5 * tm
                    .row_slice(r)
                    .iter()
                    .zip(tl.row_slice(r))
                    .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
                    .sum::<f64>()
            })
            .collect();
        let out = Tensor::from_parts(vec![tm.rows(), 1], data);
        self.push(out, Op::KlRows(im, il), "kl_rows")
    }

    /// Per-row negative log-likelihood of `target` under per-column
    /// observation models. Gaussian columns include the `½ ln 2π` constant.
    pub fn feature_nll_rows(
        &mut self,
        pred: Var,
        target: Tensor,
        kinds: &[Likelihood],
    ) -> Result<Var> {
        let ip = self.idx(pred)?;
        let tp = &self.nodes[ip].value;
        if tp.shape() != target.shape() || kinds.len() != tp.cols() {
            return shape_err(format!(
                "nll prediction {:?}, target {:?}, {} likelihoods",
                tp.shape(),
                target.shape(),
                kinds.len()
            ));
        }
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let data = (0..tp.rows())
            .map(|r| {
                tp.row_slice(r)
                    .iter()
                    .zip(target.row_slice(r))
                    .zip(kinds)
                    .map(|((&p, &x), kind)| match kind {
                        Likelihood::Gaussian => 0.5 * (x - p) * (x - p) + half_ln_2pi,
                        Likelihood::Bernoulli => bce_value(p, x),
                    })
                    .sum::<f64>()
            })
            .collect();
        let out = Tensor::from_parts(vec![tp.rows(), 1], data);
        self.push(
            out,
            Op::FeatureNllRows {
                pred: ip,
                target,
                kinds: kinds.to_vec(),
            },
            "feature_nll_rows",
        )
    }

    /// Elementwise binary cross-entropy of probabilities against `{0, 1}` targets.
    pub fn bce(&mut self, prob: Var, targets: Tensor) -> Result<Var> {
        let ip = self.idx(prob)?;
        let tp = &self.nodes[ip].value;
        if tp.shape() != targets.shape() {
            return shape_err(format!(
                "bce {:?} vs targets {:?}",
                tp.shape(),
                targets.shape()
            ));
        }
        let out = zip_map(tp, &targets, bce_value);
        self.push(out, Op::Bce(ip, targets), "bce")
    }

    /// Per-row softmax cross-entropy of logits against class indices, `[n, 1]`.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let t = &self.nodes[il].value;
        if classes.len() != t.rows() || classes.iter().any(|&c| c >= t.cols()) {
            return shape_err(format!(
                "{} class labels for logits {:?}",
                classes.len(),
                t.shape()
            ));
        }
        let data = (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                log_sum_exp(row) - row[classes[r]]
            })
            .collect();
        let out = Tensor::from_parts(vec![t.rows(), 1], data);
        self.push(
            out,
            Op::SoftmaxXentRows(il, classes.to_vec()),
            "softmax_cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients for every node are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(KernelError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Const | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            let y = &node.value;
            let mut send = |j: usize, delta: Tensor| accumulate(&mut grads, j, delta);
            match &node.op {
                Op::Const | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(*a, gemm(&g, false, tb, true));
                    send(*b, gemm(ta, true, &g, false));
                }
                Op::AddBias(a, b) => {
                    send(*b, column_sums(&g));
                    send(*a, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(*a, zip_map(&g, tb, |d, x| d * x));
                    send(*b, zip_map(&g, ta, |d, x| d * x));
                }
                Op::Scale(a, c) => send(*a, g.map(|d| d * c)),
                Op::Tanh(a) => send(*a, zip_map(&g, y, |d, t| d * (1.0 - t * t))),
                Op::Sigmoid(a) => send(*a, zip_map(&g, y, |d, s| d * s * (1.0 - s))),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    send(*a, zip_map(&g, x, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::Exp(a) => send(*a, zip_map(&g, y, |d, e| d * e)),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        send(p, take_cols(&g, offset, offset + w));
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &self.nodes[*a].value;
                    let mut out = Tensor::zeros(src.shape());
                    let (w, sw) = (g.cols(), src.cols());
                    for r in 0..g.rows() {
                        out.data_mut()[r * sw + start..r * sw + start + w]
                            .copy_from_slice(g.row_slice(r));
                    }
                    send(*a, out);
                }
                Op::BroadcastRows(a) => send(*a, column_sums(&g)),
                Op::InterleaveRows(parts) => {
                    let k = parts.len();
                    let b = g.rows() / k;
                    for (j, &p) in parts.iter().enumerate() {
                        let rows: Vec<&[f64]> = (0..b).map(|r| g.row_slice(r * k + j)).collect();
                        let data = rows.concat();
                        send(p, Tensor::from_parts(vec![b, g.cols()], data));
                    }
                }
                Op::BlockMean(a, block) => {
                    let src = &self.nodes[*a].value;
                    let m = src.cols();
                    let mut data = Vec::with_capacity(src.len());
                    for r in 0..src.rows() {
                        data.extend(g.row_slice(r / block).iter().map(|d| d / *block as f64));
                    }
                    send(*a, Tensor::from_parts(vec![src.rows(), m], data));
                }
                Op::SoftmaxRows(a) => {
                    let mut data = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let s = dot(yr, gr);
                        data.extend(yr.iter().zip(gr).map(|(p, d)| p * (d - s)));
                    }
                    send(*a, Tensor::from_parts(y.shape().to_vec(), data));
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    heads,
                    block,
                    weights,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        &g,
                        weights,
                        *heads,
                        *block,
                    );
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::SumAll(a) => {
                    let d = g.data()[0];
                    send(*a, Tensor::full(self.nodes[*a].value.shape(), d));
                }
                Op::WeightedSum(a, w) => {
                    let d = g.data()[0];
                    send(*a, w.map(|x| x * d));
                }
                Op::SqNorm(a) => {
                    let d = g.data()[0];
                    send(*a, self.nodes[*a].value.map(|x| 2.0 * x * d));
                }
                Op::KlRows(mu, lv) => {
                    let (tm, tl) = (&self.nodes[*mu].value, &self.nodes[*lv].value);
                    let m = tm.cols();
                    let mut dmu = Vec::with_capacity(tm.len());
                    let mut dlv = Vec::with_capacity(tm.len());
                    for r in 0..tm.rows() {
                        let d = g.data()[r];
                        for c in 0..m {
                            dmu.push(d * tm.get(r, c));
                            dlv.push(d * 0.5 * (tl.get(r, c).exp() - 1.0));
                        }
                    }
                    send(*mu, Tensor::from_parts(tm.shape().to_vec(), dmu));
                    send(*lv, Tensor::from_parts(tl.shape().to_vec(), dlv));
                }
                Op::FeatureNllRows {
                    pred,
                    target,
                    kinds,
                } => {
                    let tp = &self.nodes[*pred].value;
                    let mut data = Vec::with_capacity(tp.len());
                    for r in 0..tp.rows() {
                        let d = g.data()[r];
                        for (c, kind) in kinds.iter().enumerate() {
                            let (p, x) = (tp.get(r, c), target.get(r, c));
                            data.push(
                                d * match kind {
                                    Likelihood::Gaussian => p - x,
                                    Likelihood::Bernoulli => bce_grad(p, x),
                                },
                            );
                        }
                    }
                    send(*pred, Tensor::from_parts(tp.shape().to_vec(), data));
                }
                Op::Bce(p, targets) => {
                    let tp = &self.nodes[*p].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(tp.data())
                        .zip(targets.data())
                        .map(|((d, &p), &y)| d * bce_grad(p, y))
                        .collect();
                    send(*p, Tensor::from_parts(tp.shape().to_vec(), data));
                }
                Op::SoftmaxXentRows(l, classes) => {
                    let tl = &self.nodes[*l].value;
                    let mut data = Vec::with_capacity(tl.len());
                    for r in 0..tl.rows() {
                        let d = g.data()[r];
                        let start = data.len();
                        softmax_into(tl.row_slice(r), &mut data);
                        for x in &mut data[start..] {
                            *x *= d;
                        }
                        data[start + classes[r]] -= d;
                    }
                    send(*l, Tensor::from_parts(tl.shape().to_vec(), data));
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, grads[i].as_ref()) {
                store.accumulate_grad(name, g)?;
            }
        }
        store.mark_grads_ready();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], j: usize, delta: Tensor) {
    match &mut grads[j] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let m = g.cols();
    let mut out = vec![0.0; m];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![1, m], out)
}

fn take_cols(g: &Tensor, start: usize, end: usize) -> Tensor {
    let mut data = Vec::with_capacity(g.rows() * (end - start));
    for r in 0..g.rows() {
        data.extend_from_slice(&g.row_slice(r)[start..end]);
    }
    Tensor::from_parts(vec![g.rows(), end - start], data)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    weights: &[f64],
    heads: usize,
    block: usize,
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut da = vec![0.0; block];
    for bi in 0..rows / block {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..block {
                let ri = bi * block + i;
                let w_off = ((bi * heads + h) * block + i) * block;
                let a = &weights[w_off..w_off + block];
                let gi = &g.row_slice(ri)[c0..c0 + dh];
                for j in 0..block {
                    let rj = bi * block + j;
                    da[j] = dot(gi, &v.row_slice(rj)[c0..c0 + dh]);
                    for (o, x) in dv[rj * d + c0..rj * d + c0 + dh].iter_mut().zip(gi) {
                        *o += a[j] * x;
                    }
                }
                let s = dot(a, &da);
                for j in 0..block {
                    let rj = bi * block + j;
                    let ds = a[j] * (da[j] - s) * inv;
                    let kj = &k.row_slice(rj)[c0..c0 + dh];
                    for (o, x) in dq[ri * d + c0..ri * d + c0 + dh].iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let qi = &q.row_slice(ri)[c0..c0 + dh];
                    for (o, x) in dk[rj * d + c0..rj * d + c0 + dh].iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![rows, d], dq),
        Tensor::from_parts(vec![rows, d], dk),
        Tensor::from_parts(vec![rows, d], dv),
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for v in row {
        let e = (v - m).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}
