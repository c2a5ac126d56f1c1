//! Named parameter storage, model configuration, and initialization.
//!
//! A [`ParamStore`] owns every trainable array as flat f64 data in a stable
//! order; training rebuilds the graph each step by binding the store as
//! leaves, and the optimizer walks entries by index. Checkpoints persist the
//! same names.
//!
//! Initialization draws from a single stream in entry order, and the main
//! model's parameters are always drawn before any masker parameters, so runs
//! that share a seed and model shape start from bit-identical model weights
//! regardless of which masker variant is attached.

use std::collections::{BTreeMap, HashMap};

use crate::kvconfig;
use crate::rng::Rng;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

// ── configuration ──────────────────────────────────────────────────────

/// Shapes for the main model and the mask predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Active FFN channels per layer under a predicted mask.
    pub t_ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Predictor tower shapes.
    pub p_layers: usize,
    pub p_d_model: usize,
    pub p_heads: usize,
    pub p_ffn: usize,
    /// Hidden width of the score head on top of the predictor tower.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            t_ffn: 96,
            vocab: 64,
            max_seq: 256,
            p_layers: 2,
            p_d_model: 32,
            p_heads: 2,
            p_ffn: 128,
            head_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let req = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    field: field.to_string(),
                    msg: msg.to_string(),
                })
            }
        };
        req(self.n_layers >= 1, "n_layers", "must be at least 1")?;
        req(self.d_model >= 1, "d_model", "must be at least 1")?;
        req(
            self.n_heads >= 1 && self.d_model % self.n_heads == 0,
            "n_heads",
            "must divide d_model",
        )?;
        req(self.d_ffn >= 1, "d_ffn", "must be at least 1")?;
        req(
            self.t_ffn >= 1 && self.t_ffn <= self.d_ffn,
            "t_ffn",
            "must be in 1..=d_ffn",
        )?;
        req(self.vocab >= 2, "vocab", "must be at least 2")?;
        req(self.max_seq >= 2, "max_seq", "must be at least 2")?;
        req(self.p_layers >= 1, "p_layers", "must be at least 1")?;
        req(
            self.p_heads >= 1 && self.p_d_model % self.p_heads == 0,
            "p_heads",
            "must divide p_d_model",
        )?;
        req(self.p_ffn >= 1, "p_ffn", "must be at least 1")?;
        req(self.head_hidden >= 1, "head_hidden", "must be at least 1")?;
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: usize| {
            m.insert(k.to_string(), v.to_string());
        };
        put("model.n_layers", self.n_layers);
        put("model.d_model", self.d_model);
        put("model.n_heads", self.n_heads);
        put("model.d_ffn", self.d_ffn);
        put("model.t_ffn", self.t_ffn);
        put("model.vocab", self.vocab);
        put("model.max_seq", self.max_seq);
        put("predictor.n_layers", self.p_layers);
        put("predictor.d_model", self.p_d_model);
        put("predictor.n_heads", self.p_heads);
        put("predictor.d_ffn", self.p_ffn);
        put("predictor.head_hidden", self.head_hidden);
        m
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers: kvconfig::get_usize(map, "model.n_layers")?,
            d_model: kvconfig::get_usize(map, "model.d_model")?,
            n_heads: kvconfig::get_usize(map, "model.n_heads")?,
            d_ffn: kvconfig::get_usize(map, "model.d_ffn")?,
            t_ffn: kvconfig::get_usize(map, "model.t_ffn")?,
            vocab: kvconfig::get_usize(map, "model.vocab")?,
            max_seq: kvconfig::get_usize(map, "model.max_seq")?,
            p_layers: kvconfig::get_usize(map, "predictor.n_layers")?,
            p_d_model: kvconfig::get_usize(map, "predictor.d_model")?,
            p_heads: kvconfig::get_usize(map, "predictor.n_heads")?,
            p_ffn: kvconfig::get_usize(map, "predictor.d_ffn")?,
            head_hidden: kvconfig::get_usize(map, "predictor.head_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply overrides from a parsed config file; unknown keys are rejected
    /// so typos do not silently fall back to defaults.
    pub fn apply_overrides(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for key in map.keys() {
            let known = matches!(
                key.as_str(),
                "model.n_layers"
                    | "model.d_model"
                    | "model.n_heads"
                    | "model.d_ffn"
                    | "model.t_ffn"
                    | "model.vocab"
                    | "model.max_seq"
                    | "predictor.n_layers"
                    | "predictor.d_model"
                    | "predictor.n_heads"
                    | "predictor.d_ffn"
                    | "predictor.head_hidden"
            );
            if !known && key.starts_with("model.") || !known && key.starts_with("predictor.") {
                return Err(Error::Config {
                    field: key.clone(),
                    msg: "unknown model config key".to_string(),
                });
            }
        }
        let mut merged = self.to_kv();
        for (k, v) in map {
            if merged.contains_key(k) {
                merged.insert(k.clone(), v.clone());
            }
        }
        *self = ModelConfig::from_kv(&merged)?;
        Ok(())
    }
}

// ── parameter store ────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, name-addressed collection of trainable arrays.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {} shape/data mismatch",
            name
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate param name {}",
            name
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.entries[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {}", name))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {}", name));
        &mut self.entries[i]
    }

    pub fn entry(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    /// Bind every entry as a trainable leaf on a fresh graph.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut by_name = HashMap::with_capacity(self.entries.len());
        for p in &self.entries {
            let v = g.leaf(p.data.clone(), p.shape.clone())?;
            by_name.insert(p.name.clone(), v);
            vars.push(v);
        }
        Ok(BoundParams { vars, by_name })
    }
}

/// Graph handles for one binding of a [`ParamStore`].
pub struct BoundParams {
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl BoundParams {
    /// Wrap existing graph handles by name; used by gradient tests that
    /// allocate leaves through other means.
    pub fn from_map(by_name: HashMap<String, Var>) -> Self {
        let vars = by_name.values().cloned().collect();
        BoundParams { vars, by_name }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unbound param {}", name))
    }

    /// Entry-order handles, parallel to the store.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

// ── initialization ─────────────────────────────────────────────────────

fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal_scaled(std)).collect()
}

/// Linear weight d_in-by-d_out, N(0, 1/d_in) variance.
fn linear_init(rng: &mut Rng, d_in: usize, d_out: usize) -> Vec<f64> {
    normal_vec(rng, d_in * d_out, 1.0 / (d_in as f64).sqrt())
}

fn add_tower(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    n_layers: usize,
    d: usize,
    d_ffn: usize,
    vocab: usize,
    max_seq: usize,
) {
    store.add(
        &format!("{prefix}.embed"),
        vec![vocab, d],
        normal_vec(rng, vocab * d, 0.02),
    );
    store.add(
        &format!("{prefix}.pos"),
        vec![max_seq, d],
        normal_vec(rng, max_seq * d, 0.02),
    );
    for l in 0..n_layers {
        let lp = format!("{prefix}.layer{l}");
        store.add(&format!("{lp}.attn_norm"), vec![d], vec![1.0; d]);
        store.add(&format!("{lp}.wq"), vec![d, d], linear_init(rng, d, d));
        store.add(&format!("{lp}.wk"), vec![d, d], linear_init(rng, d, d));
        store.add(&format!("{lp}.wv"), vec![d, d], linear_init(rng, d, d));
        store.add(&format!("{lp}.wo"), vec![d, d], linear_init(rng, d, d));
        store.add(&format!("{lp}.ffn_norm"), vec![d], vec![1.0; d]);
        store.add(&format!("{lp}.w1"), vec![d, d_ffn], linear_init(rng, d, d_ffn));
        store.add(&format!("{lp}.w3"), vec![d, d_ffn], linear_init(rng, d, d_ffn));
        store.add(&format!("{lp}.w2"), vec![d_ffn, d], linear_init(rng, d_ffn, d));
    }
    store.add(&format!("{prefix}.final_norm"), vec![d], vec![1.0; d]);
}

/// Initialize the main model's parameters (prefix `model.`).
pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    add_tower(
        store,
        rng,
        "model",
        cfg.n_layers,
        cfg.d_model,
        cfg.d_ffn,
        cfg.vocab,
        cfg.max_seq,
    );
}

/// Initialize the predictor tower and score head (prefixes `predictor.`,
/// `head.`). The head's output layer starts at zero so an untrained
/// predictor scores every channel equally.
pub fn init_predictor(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    add_tower(
        store,
        rng,
        "predictor",
        cfg.p_layers,
        cfg.p_d_model,
        cfg.p_ffn,
        cfg.vocab,
        cfg.max_seq,
    );
    let out = cfg.n_layers * cfg.d_ffn;
    store.add(
        "head.w1",
        vec![cfg.p_d_model, cfg.head_hidden],
        linear_init(rng, cfg.p_d_model, cfg.head_hidden),
    );
    store.add("head.b1", vec![cfg.head_hidden], vec![0.0; cfg.head_hidden]);
    store.add(
        "head.w2",
        vec![cfg.head_hidden, out],
        vec![0.0; cfg.head_hidden * out],
    );
    store.add("head.b2", vec![out], vec![0.0; out]);
}

/// Initialize the input-independent score table used by the static masking
/// baseline (prefix `static.`). Small random values break score ties.
pub fn init_static_scores(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    store.add(
        "static.scores",
        vec![cfg.n_layers, cfg.d_ffn],
        normal_vec(rng, cfg.n_layers * cfg.d_ffn, 0.02),
    );
}
