//! Transformer towers and the projection head.
//!
//! All towers share one architecture: pre-norm blocks with bidirectional
//! attention, a final layer norm, and a prepended class token. The context
//! encoder sees only visible tokens; the target encoder sees the full
//! sequence; the feature predictor sees context features plus a learned
//! mask token at every hidden position.

use crate::error::{Error, Result};
use crate::tensor::{concat, scaled_dot_attention, Tensor};
use crate::tokens::MaskPlan;

use super::{Binding, TransformerConfig, ENCODER, PREDICTOR};

/// `x · w + b` for `[rows, in]` inputs.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.matmul(w)?;
    let yb = b.broadcast_to(y.shape())?;
    y.add(&yb)
}

fn layer_norm_affine(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = gain.broadcast_to(x.shape())?;
    let b = bias.broadcast_to(x.shape())?;
    x.layer_norm(&g, &b, 1e-6)
}

/// One pre-norm transformer block over `[batch, len, width]`.
fn block(bind: &Binding, prefix: &str, cfg: &TransformerConfig, x: &Tensor) -> Result<Tensor> {
    let (b, s, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let heads = cfg.heads;
    let hd = w / heads;

    let xn = layer_norm_affine(
        x,
        bind.get(&format!("{prefix}.ln1.g")),
        bind.get(&format!("{prefix}.ln1.b")),
    )?;
    let flat = xn.reshape(&[b * s, w])?;
    let to_heads = |t: Tensor| -> Result<Tensor> {
        t.reshape(&[b, s, heads, hd])?
            .transpose(1, 2)?
            .reshape(&[b * heads, s, hd])
    };
    let q = to_heads(linear(
        &flat,
        bind.get(&format!("{prefix}.attn.wq")),
        bind.get(&format!("{prefix}.attn.bq")),
    )?)?;
    let k = to_heads(linear(
        &flat,
        bind.get(&format!("{prefix}.attn.wk")),
        bind.get(&format!("{prefix}.attn.bk")),
    )?)?;
    let v = to_heads(linear(
        &flat,
        bind.get(&format!("{prefix}.attn.wv")),
        bind.get(&format!("{prefix}.attn.bv")),
    )?)?;
    let mixed = scaled_dot_attention(&q, &k, &v)?
        .reshape(&[b, heads, s, hd])?
        .transpose(1, 2)?
        .reshape(&[b * s, w])?;
    let proj = linear(
        &mixed,
        bind.get(&format!("{prefix}.attn.wo")),
        bind.get(&format!("{prefix}.attn.bo")),
    )?
    .reshape(&[b, s, w])?;
    let x = x.add(&proj)?;

    let xn = layer_norm_affine(
        &x,
        bind.get(&format!("{prefix}.ln2.g")),
        bind.get(&format!("{prefix}.ln2.b")),
    )?;
    let h = linear(
        &xn.reshape(&[b * s, w])?,
        bind.get(&format!("{prefix}.mlp.w1")),
        bind.get(&format!("{prefix}.mlp.b1")),
    )?
    .gelu();
    let h = linear(
        &h,
        bind.get(&format!("{prefix}.mlp.w2")),
        bind.get(&format!("{prefix}.mlp.b2")),
    )?
    .reshape(&[b, s, w])?;
    x.add(&h)
}

fn run_blocks(
    bind: &Binding,
    tower: &str,
    cfg: &TransformerConfig,
    mut x: Tensor,
) -> Result<Tensor> {
    for i in 0..cfg.depth {
        x = block(bind, &format!("{tower}.b{i}"), cfg, &x)?;
    }
    layer_norm_affine(
        &x,
        bind.get(&format!("{tower}.out_ln.g")),
        bind.get(&format!("{tower}.out_ln.b")),
    )
}

/// Encode a token subset with the context-encoder weights in `bind`.
///
/// `tokens` is `[batch, len, token_dim]`; `positions` gives each token's
/// grid index into the positional table; `labels` one class id per sample.
/// The class embedding is prepended as an extra token, so the output is
/// `[batch, len + 1, width]` with the class feature at slot 0.
pub fn encode_tokens(
    bind: &Binding,
    cfg: &TransformerConfig,
    tokens: &Tensor,
    positions: &[usize],
    labels: &[usize],
) -> Result<Tensor> {
    let shape = tokens.shape();
    if shape.len() != 3 || shape[2] != cfg.token_dim {
        return Err(Error::shape(
            "encode_tokens",
            format!("expected [batch, len, {}], got {shape:?}", cfg.token_dim),
        ));
    }
    let (b, s) = (shape[0], shape[1]);
    if positions.len() != s {
        return Err(Error::shape(
            "encode_tokens",
            format!("{s} tokens vs {} positions", positions.len()),
        ));
    }
    if labels.len() != b {
        return Err(Error::shape(
            "encode_tokens",
            format!("{b} samples vs {} labels", labels.len()),
        ));
    }
    let w = cfg.width;

    let projected = linear(
        &tokens.reshape(&[b * s, cfg.token_dim])?,
        bind.get("encoder.input.w"),
        bind.get("encoder.input.b"),
    )?
    .reshape(&[b, s, w])?;
    let pos = bind
        .get("embed.pos")
        .index_select(0, positions)?
        .broadcast_to(&[b, s, w])?;
    let tok = projected.add(&pos)?;
    let class = bind
        .get("embed.class")
        .embedding(labels)?
        .reshape(&[b, 1, w])?;
    let seq = concat(&[&class, &tok], 1)?;
    run_blocks(bind, ENCODER, cfg, seq)
}

/// Target-encoder features at the masked slots: run the full unmasked
/// sequence through the binding (a [`super::BindMode::Target`] one) and
/// gather the masked token outputs. The caller's binding is detached, so
/// the result never carries gradient.
pub fn encode_target(
    bind: &Binding,
    cfg: &TransformerConfig,
    all_tokens: &Tensor,
    positions: &[usize],
    labels: &[usize],
    plan: &MaskPlan,
) -> Result<Tensor> {
    let features = encode_tokens(bind, cfg, all_tokens, positions, labels)?;
    // slot i + 1: class token occupies slot 0
    let slots: Vec<usize> = plan.masked_idx.iter().map(|&i| i + 1).collect();
    features.index_select(1, &slots)
}

/// Predict features for the masked slots from context features.
///
/// The predictor input has the full sequence length: slot 0 is the class
/// feature from `ctx_features`, visible slots carry their context feature,
/// and masked slots carry the shared mask token plus the positional
/// embedding. Attention is bidirectional over everything.
pub fn predict_features(
    bind: &Binding,
    cfg: &TransformerConfig,
    ctx_features: &Tensor,
    plan: &MaskPlan,
) -> Result<Tensor> {
    let shape = ctx_features.shape();
    let n = plan.masked_idx.len() + plan.context_idx.len();
    if shape.len() != 3 || shape[1] != plan.context_idx.len() + 1 {
        return Err(Error::shape(
            "predict_features",
            format!(
                "context features {shape:?} vs plan with {} context tokens",
                plan.context_idx.len()
            ),
        ));
    }
    let (b, w) = (shape[0], shape[2]);
    let m = plan.masked_idx.len();
    if m == 0 {
        return Ok(Tensor::zeros(&[b, 0, w]));
    }

    let mask_fill = bind
        .get("embed.mask")
        .broadcast_to(&[b, m, w])?
        .add(
            &bind
                .get("embed.pos")
                .index_select(0, &plan.masked_idx)?
                .broadcast_to(&[b, m, w])?,
        )?;
    // concatenated order: [class, context..., masked...] → permute to
    // [class, token 0, token 1, ...]
    let stacked = concat(&[ctx_features, &mask_fill], 1)?;
    let mut slot_of = vec![0usize; n + 1];
    for (rank, &i) in plan.context_idx.iter().enumerate() {
        slot_of[i + 1] = 1 + rank;
    }
    for (rank, &i) in plan.masked_idx.iter().enumerate() {
        slot_of[i + 1] = 1 + plan.context_idx.len() + rank;
    }
    let ordered = stacked.index_select(1, &slot_of)?;

    let features = run_blocks(bind, PREDICTOR, cfg, ordered)?;
    let slots: Vec<usize> = plan.masked_idx.iter().map(|&i| i + 1).collect();
    features.index_select(1, &slots)
}

/// Projection head u: affine → SiLU → affine over `[rows, width]`.
pub fn project(bind: &Binding, z: &Tensor) -> Result<Tensor> {
    let h = linear(z, bind.get("proj.w1"), bind.get("proj.b1"))?.silu();
    linear(&h, bind.get("proj.w2"), bind.get("proj.b2"))
}
