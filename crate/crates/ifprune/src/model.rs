//! Decoder-only transformer with maskable FFN channels.
//!
//! Pre-norm blocks, RMS normalization, learned absolute positions, tied
//! input/output embeddings, and a gated FFN:
//!
//!   ffn(x) = ((silu(x W1) * (x W3)) * mask) W2
//!
//! The mask is a per-layer row over the FFN's combined intermediate, so a
//! masked channel contributes nothing downstream of W2. The same tower
//! builder also runs the predictor (smaller dims, no masks).

use crate::params::{BoundParams, ModelConfig};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Per-layer FFN channel masks as graph nodes, rank-1 of width d_ffn.
pub type MaskVars = Vec<Var>;

fn check_seq(len: usize, max_seq: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyPrompt);
    }
    if len > max_seq {
        return Err(Error::SequenceTooLong { len, max_seq });
    }
    Ok(())
}

/// Token plus position embeddings for a tower prefix.
fn embed_input(g: &mut Graph, bound: &BoundParams, prefix: &str, tokens: &[usize]) -> Result<Var> {
    let emb = g.embed(bound.var(&format!("{prefix}.embed")), tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.gather_rows(bound.var(&format!("{prefix}.pos")), &positions)?;
    g.add(emb, pos)
}

fn attention_block(
    g: &mut Graph,
    bound: &BoundParams,
    lp: &str,
    x: Var,
    n_heads: usize,
) -> Result<Var> {
    let h = g.rms_norm(x, bound.var(&format!("{lp}.attn_norm")))?;
    let q = g.matmul(h, bound.var(&format!("{lp}.wq")))?;
    let k = g.matmul(h, bound.var(&format!("{lp}.wk")))?;
    let v = g.matmul(h, bound.var(&format!("{lp}.wv")))?;
    let att = g.causal_attention(q, k, v, n_heads)?;
    let out = g.matmul(att, bound.var(&format!("{lp}.wo")))?;
    g.add(x, out)
}

fn ffn_block(
    g: &mut Graph,
    bound: &BoundParams,
    lp: &str,
    x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let h = g.rms_norm(x, bound.var(&format!("{lp}.ffn_norm")))?;
    let gate = g.matmul(h, bound.var(&format!("{lp}.w1")))?;
    let lin = g.matmul(h, bound.var(&format!("{lp}.w3")))?;
    let act = g.silu(gate)?;
    let mut inter = g.mul(act, lin)?;
    if let Some(m) = mask {
        inter = g.mul_row(inter, m)?;
    }
    let out = g.matmul(inter, bound.var(&format!("{lp}.w2")))?;
    g.add(x, out)
}

/// Run a full tower under `prefix` and return the final-normed hidden
/// states, n-by-d. `masks`, when given, must hold one rank-1 mask per layer.
pub fn tower_hidden(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    n_layers: usize,
    n_heads: usize,
    max_seq: usize,
    tokens: &[usize],
    masks: Option<&MaskVars>,
) -> Result<Var> {
    check_seq(tokens.len(), max_seq)?;
    if let Some(ms) = masks {
        if ms.len() != n_layers {
            return Err(Error::LayerCountMismatch {
                mask_layers: ms.len(),
                model_layers: n_layers,
            });
        }
    }
    let mut x = embed_input(g, bound, prefix, tokens)?;
    for l in 0..n_layers {
        let lp = format!("{prefix}.layer{l}");
        x = attention_block(g, bound, &lp, x, n_heads)?;
        x = ffn_block(g, bound, &lp, x, masks.map(|ms| ms[l]))?;
    }
    g.rms_norm(x, bound.var(&format!("{prefix}.final_norm")))
}

/// Final hidden states of the main model under per-layer masks.
pub fn forward_hidden(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    masks: Option<&MaskVars>,
) -> Result<Var> {
    tower_hidden(
        g,
        bound,
        "model",
        cfg.n_layers,
        cfg.n_heads,
        cfg.max_seq,
        tokens,
        masks,
    )
}

/// Next-token logits, n-by-vocab, via the tied embedding.
pub fn forward_logits(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    masks: Option<&MaskVars>,
) -> Result<Var> {
    let h = forward_hidden(g, bound, cfg, tokens, masks)?;
    g.matmul_tb(h, bound.var("model.embed"))
}

/// All-ones masks: the dense model expressed in mask form.
pub fn dense_masks(g: &mut Graph, cfg: &ModelConfig) -> Result<MaskVars> {
    (0..cfg.n_layers)
        .map(|_| g.constant(vec![1.0; cfg.d_ffn], vec![cfg.d_ffn]))
        .collect()
}

/// Masks from concrete per-layer rows (e.g. loaded from a file).
pub fn masks_from_rows(g: &mut Graph, rows: &[Vec<f64>]) -> Result<MaskVars> {
    rows.iter()
        .map(|r| g.constant(r.clone(), vec![r.len()]))
        .collect()
}

/// Mean cross-entropy of predicting `tokens[p+1]` at every position p with
/// `count[p]` set. `count` has length `tokens.len() - 1`; at least one
/// position must be counted.
pub fn next_token_loss(
    g: &mut Graph,
    logits: Var,
    tokens: &[usize],
    count: &[bool],
) -> Result<Var> {
    if tokens.len() < 2 || count.len() != tokens.len() - 1 {
        return Err(Error::BadShape {
            op: "next_token_loss",
            expected: "count aligned with tokens[1..]",
            got: vec![tokens.len(), count.len()],
        });
    }
    // row n-1 of the logits has no successor; never counted
    let mut targets: Vec<usize> = tokens[1..].to_vec();
    targets.push(0);
    let mut mask: Vec<bool> = count.to_vec();
    mask.push(false);
    g.cross_entropy(logits, &targets, &mask)
}
