//! Composite layers built from graph primitives.

use crate::error::{KernelError, Result};
use crate::graph::{Graph, Var};

/// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [1, out]`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// One LSTM step on a batch.
///
/// `w` is `[in + hidden, 4 * hidden]` acting on `[x; h]`, gate blocks ordered
/// input, forget, candidate, output. Returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let hidden = g.value(h).cols();
    let (in_dim, w_shape) = (g.value(x).cols(), g.value(w).shape().to_vec());
    if w_shape != [in_dim + hidden, 4 * hidden] {
        return Err(KernelError::Shape(format!(
            "lstm weight {w_shape:?} for input {in_dim} and hidden {hidden}"
        )));
    }
    if g.value(c).shape() != g.value(h).shape() {
        return Err(KernelError::Shape(format!(
            "lstm cell state {:?} vs hidden {:?}",
            g.value(c).shape(),
            g.value(h).shape()
        )));
    }
    let xh = g.concat_cols(&[x, h])?;
    let pre = affine(g, xh, w, b)?;
    let i_pre = g.slice_cols(pre, 0, hidden)?;
    let f_pre = g.slice_cols(pre, hidden, 2 * hidden)?;
    let c_pre = g.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o_pre = g.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(c_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Projection weights of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head self-attention over independent sequences of `block` tokens
/// stacked row-wise in `tokens`.
///
/// Returns the output and the raw attention node, whose weights can be read
/// back with [`Graph::attention_weights`].
pub fn multi_head_attention(
    g: &mut Graph,
    tokens: Var,
    w: &AttentionWeights,
    heads: usize,
    block: usize,
) -> Result<(Var, Var)> {
    let q = g.matmul(tokens, w.wq)?;
    let k = g.matmul(tokens, w.wk)?;
    let v = g.matmul(tokens, w.wv)?;
    let attended = g.block_attention(q, k, v, heads, block)?;
    let out = affine(g, attended, w.wo, w.bo)?;
    Ok((out, attended))
}

/// `mu + exp(logvar / 2) ⊙ eps` with `eps` supplied by the caller.
pub fn reparameterize_logvar(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}
