//! Materialize a masked model as a smaller dense model, exactly.
//!
//! Given per-layer masks with selected channel sets S and gate values
//! lambda, the pruned model keeps W1 and W3 columns in S and folds the gates
//! into W2 rows:
//!
//!   W1' = W1[:, S]    W3' = W3[:, S]    W2'[j, :] = lambda[S_j] * W2[S_j, :]
//!
//! so `pruned(x) = masked(x)` for every input, up to floating-point
//! reassociation (the masked path computes (a * lambda) * w, the pruned path
//! a * (lambda * w)). [`check_equivalence`] measures the worst logit gap
//! over a set of probe sequences.

use std::collections::BTreeMap;

use crate::model::{forward_logits, masks_from_rows};
use crate::params::{ModelConfig, ParamStore};
use crate::predictor::MaskSet;
use crate::tensor::Graph;
use crate::{Error, Result};

fn validate_masks(cfg: &ModelConfig, masks: &MaskSet) -> Result<()> {
    if masks.selected.len() != cfg.n_layers {
        return Err(Error::LayerCountMismatch {
            mask_layers: masks.selected.len(),
            model_layers: cfg.n_layers,
        });
    }
    for sel in &masks.selected {
        if sel.len() != masks.t {
            return Err(Error::BudgetMismatch {
                mask_t: sel.len(),
                expected: masks.t,
            });
        }
        if !sel.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invalid("selected channels must be ascending".to_string()));
        }
        if let Some(&last) = sel.last() {
            if last >= cfg.d_ffn {
                return Err(Error::IndexOutOfRange {
                    op: "materialize",
                    index: last,
                    size: cfg.d_ffn,
                });
            }
        }
    }
    Ok(())
}

/// Build the pruned model store and its config. Only `model.*` parameters
/// carry over; the result needs no masks.
pub fn materialize(
    store: &ParamStore,
    cfg: &ModelConfig,
    masks: &MaskSet,
) -> Result<(ParamStore, ModelConfig)> {
    validate_masks(cfg, masks)?;
    let t = masks.t;
    let mut out = ParamStore::new();
    let mut pruned_cfg = cfg.clone();
    pruned_cfg.d_ffn = t;
    pruned_cfg.t_ffn = t;

    let d = cfg.d_model;
    for p in store.iter() {
        if !p.name.starts_with("model.") {
            continue;
        }
        let is_layer_tensor = |suffix: &str| -> Option<usize> {
            let rest = p.name.strip_prefix("model.layer")?;
            let (lno, tail) = rest.split_once('.')?;
            if tail == suffix {
                lno.parse().ok()
            } else {
                None
            }
        };
        if let Some(l) = is_layer_tensor("w1").or_else(|| is_layer_tensor("w3")) {
            // keep selected columns
            let sel = &masks.selected[l];
            let mut data = Vec::with_capacity(d * t);
            for row in p.data.chunks_exact(cfg.d_ffn) {
                for &j in sel {
                    data.push(row[j]);
                }
            }
            out.add(&p.name, vec![d, t], data);
        } else if let Some(l) = is_layer_tensor("w2") {
            // keep selected rows, folding in the gate values
            let sel = &masks.selected[l];
            let mut data = Vec::with_capacity(t * d);
            for &j in sel {
                let lam = masks.rows[l][j];
                for &v in &p.data[j * d..(j + 1) * d] {
                    data.push(lam * v);
                }
            }
            out.add(&p.name, vec![t, d], data);
        } else {
            out.add(&p.name, p.shape.clone(), p.data.clone());
        }
    }
    Ok((out, pruned_cfg))
}

// ── pruned checkpoint config ───────────────────────────────────────────

/// Config entries describing a pruned export: the selected channels and
/// gate values per layer, plus the prompt that produced them.
pub fn pruned_config_entries(masks: &MaskSet, prompt: Option<&str>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for (l, sel) in masks.selected.iter().enumerate() {
        let idx: Vec<String> = sel.iter().map(|i| i.to_string()).collect();
        m.insert(format!("pruned.layer{l}.selected"), idx.join(","));
        // f64 default formatting round-trips exactly
        let lams: Vec<String> = sel.iter().map(|&j| masks.rows[l][j].to_string()).collect();
        m.insert(format!("pruned.layer{l}.lambda"), lams.join(","));
    }
    if let Some(p) = prompt {
        m.insert("pruned.prompt".to_string(), p.to_string());
    }
    m
}

/// Rebuild the mask set a pruned checkpoint was exported with. The lambda
/// field only carries gate values on selected channels (zero elsewhere).
pub fn mask_set_from_config(
    config: &BTreeMap<String, String>,
    full_cfg: &ModelConfig,
) -> Result<MaskSet> {
    let mut selected = Vec::with_capacity(full_cfg.n_layers);
    let mut rows = Vec::with_capacity(full_cfg.n_layers);
    for l in 0..full_cfg.n_layers {
        let sel_raw = config
            .get(&format!("pruned.layer{l}.selected"))
            .ok_or_else(|| Error::Checkpoint(format!("missing pruned.layer{l}.selected")))?;
        let lam_raw = config
            .get(&format!("pruned.layer{l}.lambda"))
            .ok_or_else(|| Error::Checkpoint(format!("missing pruned.layer{l}.lambda")))?;
        let sel: Vec<usize> = sel_raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad channel index {:?}", s)))
            })
            .collect::<Result<_>>()?;
        let lams: Vec<f64> = lam_raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad gate value {:?}", s)))
            })
            .collect::<Result<_>>()?;
        if sel.len() != lams.len() {
            return Err(Error::Checkpoint(format!(
                "layer {l}: {} channels but {} gate values",
                sel.len(),
                lams.len()
            )));
        }
        let mut row = vec![0.0; full_cfg.d_ffn];
        for (&j, &lam) in sel.iter().zip(&lams) {
            if j >= full_cfg.d_ffn {
                return Err(Error::IndexOutOfRange {
                    op: "pruned config",
                    index: j,
                    size: full_cfg.d_ffn,
                });
            }
            row[j] = lam;
        }
        selected.push(sel);
        rows.push(row);
    }
    let t = selected[0].len();
    let lambda = rows.clone();
    let set = MaskSet {
        t,
        lambda,
        selected,
        rows,
    };
    validate_masks(full_cfg, &set)?;
    Ok(set)
}

// ── equivalence checking ───────────────────────────────────────────────

#[derive(Debug)]
pub struct EquivReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Worst absolute logit difference between the masked full model and the
/// pruned model over the given probe sequences.
pub fn check_equivalence(
    full_store: &ParamStore,
    full_cfg: &ModelConfig,
    mask_rows: &[Vec<f64>],
    pruned_store: &ParamStore,
    pruned_cfg: &ModelConfig,
    seqs: &[Vec<usize>],
    tol: f64,
) -> Result<EquivReport> {
    let mut max_diff = 0.0_f64;
    for seq in seqs {
        let mut g = Graph::new();
        let bound_full = full_store.bind(&mut g)?;
        let masks = masks_from_rows(&mut g, mask_rows)?;
        let masked = forward_logits(&mut g, &bound_full, full_cfg, seq, Some(&masks))?;

        let bound_pruned = pruned_store.bind(&mut g)?;
        let pruned = forward_logits(&mut g, &bound_pruned, pruned_cfg, seq, None)?;

        for (a, b) in g.value(masked).iter().zip(g.value(pruned)) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    Ok(EquivReport {
        trials: seqs.len(),
        max_abs_diff: max_diff,
        tol,
        pass: max_diff <= tol,
    })
}

/// Random probe sequences over the model's vocabulary.
pub fn random_probe_seqs(cfg: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = crate::rng::Rng::new(crate::rng::derive(seed, crate::rng::TRIAL));
    (0..n)
        .map(|_| (0..len).map(|_| rng.below(cfg.vocab)).collect())
        .collect()
}
