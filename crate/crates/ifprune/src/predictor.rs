//! Prompt-conditioned FFN mask prediction.
//!
//! A small transformer tower encodes the prompt; its final-position hidden
//! state feeds a two-layer score head that emits one score per (layer,
//! channel) of the main model. Each layer's scores pass through the budgeted
//! top-k relaxation to produce that layer's channel mask.
//!
//! The same score-to-mask path also serves the static baseline, whose scores
//! come from a learned table instead of a prompt encoding.

use crate::model::{tower_hidden, MaskVars};
use crate::params::{BoundParams, ModelConfig, ParamStore};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Concrete per-layer masks for one prompt: the relaxed gates, the selected
/// channel sets (ascending), and the mask rows actually applied (gate value
/// on selected channels, zero elsewhere).
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub t: usize,
    pub lambda: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
    pub rows: Vec<Vec<f64>>,
}

/// Final-position encoding of a prompt, 1-by-p_d_model.
pub fn encode_prompt(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    prompt: &[usize],
) -> Result<Var> {
    let h = tower_hidden(
        g,
        bound,
        "predictor",
        cfg.p_layers,
        cfg.p_heads,
        cfg.max_seq,
        prompt,
        None,
    )?;
    g.gather_rows(h, &[prompt.len() - 1])
}

/// Channel scores for a prompt, n_layers-by-d_ffn.
pub fn prompt_scores(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    prompt: &[usize],
) -> Result<Var> {
    let enc = encode_prompt(g, bound, cfg, prompt)?;
    let pre = g.matmul(enc, bound.var("head.w1"))?;
    let pre = g.add_row(pre, bound.var("head.b1"))?;
    let act = g.silu(pre)?;
    let flat = g.matmul(act, bound.var("head.w2"))?;
    let flat = g.add_row(flat, bound.var("head.b2"))?;
    g.reshape(flat, vec![cfg.n_layers, cfg.d_ffn])
}

/// Per-layer masks from a score matrix, one top-k pass per row.
pub fn masks_from_scores(
    g: &mut Graph,
    scores: Var,
    n_layers: usize,
    t: usize,
) -> Result<MaskVars> {
    let d_ffn = g.shape(scores)[1];
    let mut masks = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let row = g.gather_rows(scores, &[l])?;
        let row = g.reshape(row, vec![d_ffn])?;
        masks.push(g.soft_topk(row, t)?);
    }
    Ok(masks)
}

/// Graph-integrated mask prediction; gradients flow back into the predictor.
pub fn predict_mask_vars(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    prompt: &[usize],
) -> Result<MaskVars> {
    let scores = prompt_scores(g, bound, cfg, prompt)?;
    masks_from_scores(g, scores, cfg.n_layers, cfg.t_ffn)
}

/// Masks from the static score table (input-independent baseline).
pub fn static_mask_vars(g: &mut Graph, bound: &BoundParams, cfg: &ModelConfig) -> Result<MaskVars> {
    let scores = bound.var("static.scores");
    masks_from_scores(g, scores, cfg.n_layers, cfg.t_ffn)
}

fn collect_mask_set(g: &Graph, masks: &MaskVars, t: usize) -> MaskSet {
    let mut lambda = Vec::with_capacity(masks.len());
    let mut selected = Vec::with_capacity(masks.len());
    let mut rows = Vec::with_capacity(masks.len());
    for &m in masks {
        let row = g.topk_row(m).expect("mask var from soft_topk");
        lambda.push(row.lambda.clone());
        selected.push(row.selected.clone());
        rows.push(row.mask.clone());
    }
    MaskSet {
        t,
        lambda,
        selected,
        rows,
    }
}

/// Concrete masks for a prompt on a throwaway graph.
pub fn predict_mask_set(
    store: &ParamStore,
    cfg: &ModelConfig,
    prompt: &[usize],
) -> Result<MaskSet> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let masks = predict_mask_vars(&mut g, &bound, cfg, prompt)?;
    Ok(collect_mask_set(&g, &masks, cfg.t_ffn))
}

/// Concrete masks from the static score table.
pub fn static_mask_set(store: &ParamStore, cfg: &ModelConfig) -> Result<MaskSet> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let masks = static_mask_vars(&mut g, &bound, cfg)?;
    Ok(collect_mask_set(&g, &masks, cfg.t_ffn))
}

// ── mask file format ───────────────────────────────────────────────────

/// Render selected channels as one line per layer: `layer 0: 3 17 42 ...`.
pub fn format_selected(selected: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for (l, idx) in selected.iter().enumerate() {
        out.push_str(&format!("layer {}:", l));
        for i in idx {
            out.push_str(&format!(" {}", i));
        }
        out.push('\n');
    }
    out
}

/// Parse the `layer l: ...` format back into per-layer channel lists.
/// Layers must appear in order starting at zero.
pub fn parse_selected(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("layer ")
            .ok_or_else(|| Error::Data(format!("mask file: expected 'layer l: ...', got {:?}", line)))?;
        let (lno, idx_part) = rest
            .split_once(':')
            .ok_or_else(|| Error::Data(format!("mask file: missing ':' in {:?}", line)))?;
        let l: usize = lno
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("mask file: bad layer number {:?}", lno)))?;
        if l != out.len() {
            return Err(Error::Data(format!(
                "mask file: expected layer {}, found layer {}",
                out.len(),
                l
            )));
        }
        let idx: Vec<usize> = idx_part
            .split_whitespace()
            .map(|tok| {
                tok.parse()
                    .map_err(|_| Error::Data(format!("mask file: bad channel index {:?}", tok)))
            })
            .collect::<Result<_>>()?;
        if idx.is_empty() {
            return Err(Error::Data(format!("mask file: layer {} has no channels", l)));
        }
        out.push(idx);
    }
    if out.is_empty() {
        return Err(Error::Data("mask file: no layers".to_string()));
    }
    Ok(out)
}

/// Hard mask rows (gate 1.0 on listed channels) from parsed channel lists,
/// validated against the model shape.
pub fn hard_mask_rows(selected: &[Vec<usize>], cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    if selected.len() != cfg.n_layers {
        return Err(Error::LayerCountMismatch {
            mask_layers: selected.len(),
            model_layers: cfg.n_layers,
        });
    }
    let mut rows = Vec::with_capacity(selected.len());
    for idx in selected {
        if idx.len() != cfg.t_ffn {
            return Err(Error::BudgetMismatch {
                mask_t: idx.len(),
                expected: cfg.t_ffn,
            });
        }
        let mut row = vec![0.0; cfg.d_ffn];
        for &i in idx {
            if i >= cfg.d_ffn {
                return Err(Error::IndexOutOfRange {
                    op: "mask file",
                    index: i,
                    size: cfg.d_ffn,
                });
            }
            row[i] = 1.0;
        }
        rows.push(row);
    }
    Ok(rows)
}
