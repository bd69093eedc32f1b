use super::tape::{AttentionShape, Tape, Var};
use crate::error::{Error, Result};

/// Tape handles of one multi-head attention layer.
///
/// Projections are `[d_model, heads * key_dim]` for queries, keys and values
/// and `[heads * key_dim, d_model]` for the output, each with a bias.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query_w: Var,
    pub query_b: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Multi-head self-attention over `x[batch, len, d_model]`.
///
/// `key_dim` is the per-head projection width and the logits are scaled by
/// `1 / sqrt(key_dim)`. Padded positions are excluded as keys and produce
/// zero rows. There are no positional terms, so the layer is
/// equivariant to permutations of the `len` axis.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    params: &AttentionParams,
    key_dim: usize,
    num_heads: usize,
    pad: &[bool],
) -> Result<Var> {
    if num_heads < 1 || key_dim < 1 {
        return Err(Error::config(format!(
            "attention needs num_heads >= 1 and key_dim >= 1, got {num_heads} and {key_dim}"
        )));
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!(
            "attention input must be [batch, len, d_model], got {shape:?}"
        )));
    }
    let geom = AttentionShape {
        batch: shape[0],
        len: shape[1],
        heads: num_heads,
        key_dim,
    };
    let q = dense(tape, x, params.query_w, params.query_b)?;
    let k = dense(tape, x, params.key_w, params.key_b)?;
    let v = dense(tape, x, params.value_w, params.value_b)?;
    let mixed = tape.attention(q, k, v, geom, pad)?;
    let out = dense(tape, mixed, params.out_w, params.out_b)?;
    if !pad.iter().any(|&p| p) {
        return Ok(out);
    }
    // padded query rows stay zero after the output bias too
    let d_model = shape[2];
    let keep = pad
        .iter()
        .flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, d_model))
        .collect();
    tape.mul_const(out, keep)
}
