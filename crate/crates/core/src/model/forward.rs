use rand::Rng;

use super::{ModelConfig, ModelKind};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::numerics::{multi_head_attention, AttentionParams, Bound, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Tape handles produced by a forward pass. Position tensors are
/// `[batch, len, ...]`.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub hidden: Var,
    pub logits: Var,
    pub probs: Var,
    /// Labrador value predictions `[batch, len, 1]`.
    pub values: Option<Var>,
}

fn dense(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.w")))?;
    tape.add_bias(y, p.var(&format!("{name}.b")))
}

fn norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.var(&format!("{name}.g")), p.var(&format!("{name}.b")), LAYER_NORM_EPS)
}

/// Row lookup of `tokens[batch * len]`; the pad token 0 embeds to zeros.
pub fn categorical_embed(tape: &mut Tape, p: &Bound, tokens: &[u32], batch: usize, len: usize) -> Result<Var> {
    tape.embedding(p.var("embed.table"), tokens, &[batch, len])
}

/// `LayerNorm(ReLU(Dense(Dense(value) + token_embedding + null_embedding)))`.
///
/// Null and padded positions feed value 0.0; null positions also add the
/// null token's embedding.
#[allow(clippy::too_many_arguments)]
pub fn continuous_embed(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    values: &[f64],
    nulls: &[bool],
    pad: &[bool],
    token_embeddings: Var,
    shape: (usize, usize),
) -> Result<Var> {
    let (batch, len) = shape;
    let n = batch * len;
    if values.len() != n || nulls.len() != n || pad.len() != n {
        return Err(Error::dim(format!(
            "continuous embedding expects {n} positions, got {} values, {} null flags, {} pad flags",
            values.len(),
            nulls.len(),
            pad.len()
        )));
    }
    let null_token = cfg
        .null_token()
        .ok_or_else(|| Error::config("continuous embedding needs a Labrador configuration"))?;
    let mut fed = vec![0.0; n];
    let mut null_tokens = vec![0u32; n];
    for i in 0..n {
        if pad[i] {
            continue;
        }
        if nulls[i] {
            null_tokens[i] = null_token;
        } else if (0.0..=1.0).contains(&values[i]) {
            fed[i] = values[i];
        } else {
            return Err(Error::data(format!(
                "value {} at position {i} outside [0, 1]",
                values[i]
            )));
        }
    }
    let v = tape.constant(Tensor::new(vec![batch, len, 1], fed)?);
    let projected = dense(tape, p, "cont.value", v)?;
    let null_emb = tape.embedding(p.var("embed.table"), &null_tokens, &[batch, len])?;
    let x = tape.add(projected, token_embeddings)?;
    let x = tape.add(x, null_emb)?;
    let x = dense(tape, p, "cont.mix", x)?;
    let x = tape.relu(x);
    norm(tape, p, "cont.ln", x)
}

/// Post-norm blocks: attention, dropout, `LN(x + a)`, feedforward,
/// dropout, `LN(x + f)`.
pub fn backbone_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    mut x: Var,
    pad: &[bool],
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let key_dim = cfg.resolved_key_dim()?;
    for i in 0..cfg.num_layers {
        let b = format!("block{i}");
        let v = |s: &str| p.var(&format!("{b}.attn.{s}"));
        let attn = AttentionParams {
            query_w: v("q.w"),
            query_b: v("q.b"),
            key_w: v("k.w"),
            key_b: v("k.b"),
            value_w: v("v.w"),
            value_b: v("v.b"),
            out_w: v("o.w"),
            out_b: v("o.b"),
        };
        let a = multi_head_attention(tape, x, &attn, key_dim, cfg.num_heads, pad)?;
        let a = tape.dropout(a, cfg.dropout, rng, training)?;
        let r = tape.add(x, a)?;
        x = norm(tape, p, &format!("{b}.ln1"), r)?;
        let f = dense(tape, p, &format!("{b}.ff1"), x)?;
        let f = tape.relu(f);
        let f = dense(tape, p, &format!("{b}.ff2"), f)?;
        let f = tape.dropout(f, cfg.dropout, rng, training)?;
        let r = tape.add(x, f)?;
        x = norm(tape, p, &format!("{b}.ln2"), r)?;
    }
    Ok(x)
}

/// ReLU dense then a softmax over the head classes. Returns
/// `(logits, probs)`.
pub fn categorical_head(tape: &mut Tape, p: &Bound, h: Var) -> Result<(Var, Var)> {
    let z = dense(tape, p, "head.cat.hidden", h)?;
    let z = tape.relu(z);
    let logits = dense(tape, p, "head.cat.out", z)?;
    let axis = tape.shape(logits).len() - 1;
    let probs = tape.softmax(logits, axis)?;
    Ok((logits, probs))
}

/// `sigmoid(Dense(ReLU(Dense(concat[h, probs]))))`.
pub fn continuous_head(tape: &mut Tape, p: &Bound, h: Var, probs: Var) -> Result<Var> {
    let c = tape.concat(h, probs)?;
    let z = dense(tape, p, "head.cont.hidden", c)?;
    let z = tape.relu(z);
    let z = dense(tape, p, "head.cont.out", z)?;
    Ok(tape.sigmoid(z))
}

/// Embedding module plus backbone; the final position embeddings.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let (b, l) = (batch.batch, batch.len);
    let tok = categorical_embed(tape, p, &batch.tokens, b, l)?;
    let x = match cfg.kind {
        ModelKind::Labrador => continuous_embed(tape, p, cfg, &batch.values, &batch.nulls, &batch.pad, tok, (b, l))?,
        ModelKind::Bert => tok,
    };
    backbone_forward(tape, p, cfg, x, &batch.pad, rng, training)
}

pub fn labrador_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    rng: &mut R,
    training: bool,
) -> Result<Output> {
    if cfg.kind != ModelKind::Labrador {
        return Err(Error::config("labrador_forward called with a baseline configuration"));
    }
    let hidden = encode(tape, p, cfg, batch, rng, training)?;
    let (logits, probs) = categorical_head(tape, p, hidden)?;
    let values = continuous_head(tape, p, hidden, probs)?;
    Ok(Output {
        hidden,
        logits,
        probs,
        values: Some(values),
    })
}

pub fn bert_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    rng: &mut R,
    training: bool,
) -> Result<Output> {
    if cfg.kind != ModelKind::Bert {
        return Err(Error::config("bert_forward called with a Labrador configuration"));
    }
    let hidden = encode(tape, p, cfg, batch, rng, training)?;
    let (logits, probs) = categorical_head(tape, p, hidden)?;
    Ok(Output {
        hidden,
        logits,
        probs,
        values: None,
    })
}

/// Dispatches on the configured architecture.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    rng: &mut R,
    training: bool,
) -> Result<Output> {
    match cfg.kind {
        ModelKind::Labrador => labrador_forward(tape, p, cfg, batch, rng, training),
        ModelKind::Bert => bert_forward(tape, p, cfg, batch, rng, training),
    }
}
