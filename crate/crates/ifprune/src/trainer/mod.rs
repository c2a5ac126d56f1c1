//! Training: chunked continued pretraining, instruction tuning, baselines.
//!
//! Continued pretraining splits each n-token window into K chunks of s
//! tokens. For every k in 1..K the predictor reads chunk k-1 *alone*, its
//! mask is applied while the model consumes the whole prefix up to the end
//! of chunk k, and only the positions that predict chunk k's tokens are
//! scored:
//!
//!   mask source:  tokens[(k-1)*s .. k*s)
//!   forward over: tokens[0 .. (k+1)*s)
//!   counted:      positions [k*s - 1, (k+1)*s - 1)
//!
//! so each mask is chosen by the text just before the span it must model,
//! never by the scored tokens themselves. That mirrors inference, where the
//! prompt picks the channels that then have to carry the continuation.
//! Instruction tuning keeps one mask per example, predicted from the prompt
//! only, and scores response positions.
//!
//! One optimizer step = one fresh graph over a sampled batch, backward,
//! global-norm clipping, AdamW with warmup + cosine decay. Every run is a
//! pure function of (initial parameters, corpus, config, seed).

pub mod eval;
pub mod optim;

pub use eval::{evaluate, greedy_decode, EvalReport, MaskMode};
pub use optim::{clip_global, global_norm, lr_at, AdamW};

use std::io::Write as _;
use std::path::PathBuf;

use crate::datagen::{self, CptDoc, SftPair};
use crate::model::{forward_logits, next_token_loss};
use crate::params::{ModelConfig, ParamStore};
use crate::predictor::{predict_mask_vars, static_mask_vars};
use crate::rng::{derive, Rng, BATCH};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// A step whose loss exceeds this is treated as diverged.
pub const DIVERGE_LOSS: f64 = 50.0;

/// Which masking scheme trains alongside the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskerKind {
    /// Prompt-conditioned masks from the predictor.
    Dynamic,
    /// A learned input-independent score table.
    Static,
    /// No masks at all (use with a model sized to the budget).
    Dense,
}

impl MaskerKind {
    pub fn parse(name: &str) -> Result<MaskerKind> {
        match name {
            "dynamic" => Ok(MaskerKind::Dynamic),
            "static" => Ok(MaskerKind::Static),
            "dense" => Ok(MaskerKind::Dense),
            other => Err(Error::Invalid(format!("unknown masker {:?}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskerKind::Dynamic => "dynamic",
            MaskerKind::Static => "static",
            MaskerKind::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub floor_frac: f64,
    pub clip: f64,
    pub weight_decay: f64,
    /// Chunk length s for continued pretraining.
    pub chunk: usize,
    /// Chunk count K; each training window is K*s tokens.
    pub n_chunks: usize,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            batch: 8,
            peak_lr: 3e-3,
            warmup_frac: 0.05,
            floor_frac: 0.1,
            clip: 1.0,
            weight_decay: 0.01,
            chunk: 32,
            n_chunks: 2,
            seed: 0,
            log_path: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub lrs: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

// ── chunked pretraining objective ──────────────────────────────────────

/// What one chunk term of the objective looked at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkTrace {
    /// Chunk index k whose tokens were scored (the mask came from chunk k-1).
    pub chunk: usize,
    /// Token range [start, end) fed to the mask source.
    pub mask_tokens: (usize, usize),
    /// Length of the prefix the model consumed under that mask.
    pub prefix_len: usize,
    /// Position range [start, end) whose next-token losses were counted.
    pub counted: (usize, usize),
    /// Channels the dynamic mask selected, per layer (empty for
    /// static/dense maskers).
    pub selected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default)]
pub struct CptTrace {
    pub n_tokens: usize,
    pub chunk_len: usize,
    pub chunks: Vec<ChunkTrace>,
}

/// The loss for one n = K*s token window, plus a trace of exactly which
/// tokens drove each mask and which positions were scored.
pub fn cpt_doc_loss(
    g: &mut Graph,
    bound: &crate::params::BoundParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    kind: MaskerKind,
    chunk: usize,
    n_chunks: usize,
) -> Result<(Var, CptTrace)> {
    if n_chunks < 2 || chunk == 0 || tokens.len() != n_chunks * chunk {
        return Err(Error::Invalid(format!(
            "chunked loss needs K>=2 chunks of s tokens; got {} tokens for K={} s={}",
            tokens.len(),
            n_chunks,
            chunk
        )));
    }
    let static_masks = match kind {
        MaskerKind::Static => Some(static_mask_vars(g, bound, cfg)?),
        _ => None,
    };
    let total_counted = ((n_chunks - 1) * chunk) as f64;
    let mut trace = CptTrace {
        n_tokens: tokens.len(),
        chunk_len: chunk,
        chunks: Vec::new(),
    };
    let mut total: Option<Var> = None;
    for k in 1..n_chunks {
        let (m_start, m_end) = (k * chunk, (k + 1) * chunk);
        let src = (m_start - chunk, m_start);
        let (masks, selected) = match kind {
            MaskerKind::Dynamic => {
                let ms = predict_mask_vars(g, bound, cfg, &tokens[src.0..src.1])?;
                let sel = ms
                    .iter()
                    .map(|&v| g.topk_row(v).expect("mask node").selected.clone())
                    .collect();
                (Some(ms), sel)
            }
            MaskerKind::Static => (static_masks.clone(), Vec::new()),
            MaskerKind::Dense => (None, Vec::new()),
        };
        let prefix = &tokens[..m_end];
        let logits = forward_logits(g, bound, cfg, prefix, masks.as_ref())?;
        let counted = (m_start - 1, m_end - 1);
        let count: Vec<bool> = (0..prefix.len() - 1)
            .map(|p| p >= counted.0 && p < counted.1)
            .collect();
        let ce = next_token_loss(g, logits, prefix, &count)?;
        let term = g.scale(ce, chunk as f64 / total_counted)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        trace.chunks.push(ChunkTrace {
            chunk: k,
            mask_tokens: src,
            prefix_len: m_end,
            counted,
            selected,
        });
    }
    Ok((total.unwrap(), trace))
}

// ── instruction tuning objective ───────────────────────────────────────

/// Mean response cross-entropy for one pair. The mask is predicted from the
/// prompt tokens only; the separator and response never influence it.
/// Returns the loss node and the number of counted positions.
pub fn sft_pair_loss(
    g: &mut Graph,
    bound: &crate::params::BoundParams,
    cfg: &ModelConfig,
    pair: &SftPair,
    kind: MaskerKind,
) -> Result<(Var, usize)> {
    let (seq, len_p, len_r) = eval::sft_tokens(pair)?;
    let masks = match kind {
        MaskerKind::Dynamic => Some(predict_mask_vars(g, bound, cfg, &seq[..len_p])?),
        MaskerKind::Static => Some(static_mask_vars(g, bound, cfg)?),
        MaskerKind::Dense => None,
    };
    let logits = forward_logits(g, bound, cfg, &seq, masks.as_ref())?;
    let count = eval::response_count_mask(seq.len(), len_p, len_r);
    let ce = next_token_loss(g, logits, &seq, &count)?;
    Ok((ce, len_r))
}

// ── the step loop ──────────────────────────────────────────────────────

struct CsvLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
}

impl CsvLog {
    fn open(path: Option<&PathBuf>) -> Result<CsvLog> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    if !dir.as_os_str().is_empty() {
                        std::fs::create_dir_all(dir)?;
                    }
                }
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(f, "step,stage,loss,grad_norm,lr")?;
                Some(f)
            }
            None => None,
        };
        Ok(CsvLog { out })
    }

    fn row(&mut self, step: usize, stage: &str, loss: f64, grad_norm: f64, lr: f64) -> Result<()> {
        if let Some(f) = &mut self.out {
            writeln!(f, "{step},{stage},{loss},{grad_norm},{lr}")?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(f) = &mut self.out {
            f.flush()?;
        }
        Ok(())
    }
}

fn run_loop<F>(
    store: &mut ParamStore,
    tcfg: &TrainConfig,
    stage: &str,
    mut batch_loss: F,
) -> Result<TrainReport>
where
    F: FnMut(&mut Graph, &crate::params::BoundParams, &mut Rng) -> Result<Var>,
{
    let mut opt = AdamW::new(store, tcfg.weight_decay);
    let mut log = CsvLog::open(tcfg.log_path.as_ref())?;
    let mut report = TrainReport::default();
    let batch_seed = derive(tcfg.seed, BATCH);
    let mut last_good = 0usize;
    for step in 0..tcfg.steps {
        let mut rng = Rng::new(derive(batch_seed, step as u64));
        let mut g = Graph::new();
        let bound = store.bind(&mut g)?;
        let loss = match batch_loss(&mut g, &bound, &mut rng) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged { step, last_good });
            }
            Err(e) => return Err(e),
        };
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() || loss_val > DIVERGE_LOSS {
            return Err(Error::Diverged { step, last_good });
        }
        g.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .map(|&v| g.grad(v).expect("trained leaf").to_vec())
            .collect();
        drop(g);
        let grad_norm = clip_global(&mut grads, tcfg.clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, last_good });
        }
        let lr = lr_at(step, tcfg.steps, tcfg.peak_lr, tcfg.warmup_frac, tcfg.floor_frac);
        opt.step(store, &grads, lr);
        log.row(step, stage, loss_val, grad_norm, lr)?;
        report.losses.push(loss_val);
        report.grad_norms.push(grad_norm);
        report.lrs.push(lr);
        last_good = step;
    }
    log.finish()?;
    Ok(report)
}

/// Continued pretraining over documents. Each step samples `batch` windows
/// of K*s tokens (uniform document, uniform offset) and averages their
/// chunked losses.
pub fn train_cpt(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    docs: &[CptDoc],
    tcfg: &TrainConfig,
    kind: MaskerKind,
) -> Result<TrainReport> {
    let n = tcfg.n_chunks * tcfg.chunk;
    let token_docs: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| datagen::encode(&d.text))
        .collect::<Result<_>>()?;
    if token_docs.iter().any(|t| t.len() < n) {
        return Err(Error::Data(format!("every document must have at least {n} tokens")));
    }
    if token_docs.is_empty() {
        return Err(Error::Data("no documents".to_string()));
    }
    run_loop(store, tcfg, "cpt", |g, bound, rng| {
        let mut total: Option<Var> = None;
        for _ in 0..tcfg.batch {
            let doc = &token_docs[rng.below(token_docs.len())];
            let start = rng.below(doc.len() - n + 1);
            let window = &doc[start..start + n];
            let (loss, _) = cpt_doc_loss(g, bound, cfg, window, kind, tcfg.chunk, tcfg.n_chunks)?;
            let term = g.scale(loss, 1.0 / tcfg.batch as f64)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.unwrap())
    })
}

/// Instruction tuning over prompt/response pairs. Each step samples `batch`
/// pairs; the batch loss is the mean over all counted response positions.
pub fn train_sft(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    pairs: &[SftPair],
    tcfg: &TrainConfig,
    kind: MaskerKind,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs".to_string()));
    }
    run_loop(store, tcfg, "sft", |g, bound, rng| {
        let picked: Vec<&SftPair> = (0..tcfg.batch).map(|_| &pairs[rng.below(pairs.len())]).collect();
        let mut terms = Vec::with_capacity(picked.len());
        let mut total_count = 0usize;
        for pair in picked {
            let (ce, n) = sft_pair_loss(g, bound, cfg, pair, kind)?;
            terms.push((ce, n));
            total_count += n;
        }
        let mut total: Option<Var> = None;
        for (ce, n) in terms {
            let term = g.scale(ce, n as f64 / total_count as f64)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.unwrap())
    })
}

// ── end-to-end gradient verification ───────────────────────────────────

/// Finite-difference check of the whole chunked objective: every model and
/// predictor parameter, gradients flowing through the mask relaxation.
///
/// The score head is given random weights: a freshly zero-initialized head
/// puts every channel score at an exact tie, where the selected set is not
/// locally constant and finite differences are meaningless.
pub fn chunked_loss_grad_check(
    eps: f64,
    rel_tol: f64,
    abs_tol: f64,
    seed: u64,
) -> Result<crate::tensor::GradCheckReport> {
    use crate::tensor::CheckParam;

    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 12,
        t_ffn: 5,
        vocab: 24,
        max_seq: 16,
        p_layers: 1,
        p_d_model: 8,
        p_heads: 2,
        p_ffn: 8,
        head_hidden: 8,
    };
    let mut rng = Rng::new(derive(seed, crate::rng::INIT));
    let mut store = ParamStore::new();
    crate::params::init_model(&mut store, &cfg, &mut rng);
    crate::params::init_predictor(&mut store, &cfg, &mut rng);
    for name in ["head.w2", "head.b2"] {
        for v in &mut store.get_mut(name).data {
            *v = rng.normal_scaled(0.3);
        }
    }
    let (chunk, n_chunks) = (4, 2);
    let tokens: Vec<usize> = (0..chunk * n_chunks).map(|_| rng.below(cfg.vocab)).collect();

    let params: Vec<CheckParam> = store
        .iter()
        .map(|p| CheckParam {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.clone(),
        })
        .collect();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    crate::tensor::grad_check(
        &params,
        |g, vars| {
            let by_name = names.iter().cloned().zip(vars.iter().copied()).collect();
            let bound = crate::params::BoundParams::from_map(by_name);
            let (loss, _) = cpt_doc_loss(g, &bound, &cfg, &tokens, MaskerKind::Dynamic, chunk, n_chunks)?;
            Ok(loss)
        },
        eps,
        rel_tol,
        abs_tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Domain;
    use crate::params::{init_model, init_predictor, init_static_scores};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 16,
            t_ffn: 8,
            vocab: 64,
            max_seq: 64,
            p_layers: 1,
            p_d_model: 8,
            p_heads: 2,
            p_ffn: 16,
            head_hidden: 16,
        }
    }

    fn full_store(cfg: &ModelConfig, seed: u64, spice_head: bool) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        init_model(&mut s, cfg, &mut rng);
        init_predictor(&mut s, cfg, &mut rng);
        init_static_scores(&mut s, cfg, &mut rng);
        if spice_head {
            for v in &mut s.get_mut("head.w2").data {
                *v = rng.normal_scaled(0.4);
            }
        }
        s
    }

    fn tiny_docs() -> Vec<CptDoc> {
        datagen::gen_cpt_corpus(12, 77)
    }

    fn simple_pairs() -> Vec<SftPair> {
        vec![
            SftPair { prompt: "solve: 1+1".into(), response: "2".into(), domain: Domain::Arith },
            SftPair { prompt: "solve: 2+3".into(), response: "5".into(), domain: Domain::Arith },
            SftPair { prompt: "reverse: ab".into(), response: "ba".into(), domain: Domain::Strops },
            SftPair { prompt: "reverse: ok".into(), response: "ko".into(), domain: Domain::Strops },
            SftPair { prompt: "duplicate: no".into(), response: "nono".into(), domain: Domain::Strops },
            SftPair { prompt: "solve: 4-1".into(), response: "3".into(), domain: Domain::Arith },
        ]
    }

    fn small_tcfg(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            chunk: 8,
            n_chunks: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trace_ranges_are_exact() {
        let cfg = tiny_config();
        let store = full_store(&cfg, 1, false);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let tokens: Vec<usize> = (0..8).map(|i| 4 + i).collect();
        let (_, trace) = cpt_doc_loss(&mut g, &bound, &cfg, &tokens, MaskerKind::Dynamic, 4, 2).unwrap();
        assert_eq!(trace.n_tokens, 8);
        assert_eq!(trace.chunk_len, 4);
        assert_eq!(trace.chunks.len(), 1);
        let c = &trace.chunks[0];
        assert_eq!(c.chunk, 1);
        assert_eq!(c.mask_tokens, (0, 4));
        assert_eq!(c.prefix_len, 8);
        assert_eq!(c.counted, (3, 7));
        assert_eq!(c.selected.len(), cfg.n_layers);

        // three chunks of two tokens
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let tokens: Vec<usize> = (0..6).map(|i| 4 + i).collect();
        let (_, trace) = cpt_doc_loss(&mut g, &bound, &cfg, &tokens, MaskerKind::Dense, 2, 3).unwrap();
        let got: Vec<_> = trace
            .chunks
            .iter()
            .map(|c| (c.chunk, c.mask_tokens, c.prefix_len, c.counted))
            .collect();
        assert_eq!(got, vec![(1, (0, 2), 4, (1, 3)), (2, (2, 4), 6, (3, 5))]);
    }

    #[test]
    fn chunked_loss_matches_manual_recomputation() {
        let cfg = tiny_config();
        let store = full_store(&cfg, 2, true);
        let tokens: Vec<usize> = vec![4, 9, 30, 40, 11, 12, 41, 5];

        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let (loss, _) = cpt_doc_loss(&mut g, &bound, &cfg, &tokens, MaskerKind::Dynamic, 4, 2).unwrap();
        let got = g.scalar_value(loss);

        // same ops by hand: mask from tokens[0..4], forward all 8, count 3..7
        let mut g2 = Graph::new();
        let bound2 = store.bind(&mut g2).unwrap();
        let masks = predict_mask_vars(&mut g2, &bound2, &cfg, &tokens[..4]).unwrap();
        let logits = forward_logits(&mut g2, &bound2, &cfg, &tokens, Some(&masks)).unwrap();
        let count: Vec<bool> = (0..7).map(|p| (3..7).contains(&p)).collect();
        let ce = next_token_loss(&mut g2, logits, &tokens, &count).unwrap();
        let want_var = g2.scale(ce, 1.0).unwrap();
        let want = g2.scalar_value(want_var);

        assert_eq!(got, want);
    }

    #[test]
    fn mask_comes_from_the_preceding_chunk_only() {
        let cfg = tiny_config();
        let store = full_store(&cfg, 3, true);
        let run = |tokens: &[usize]| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let (_, trace) =
                cpt_doc_loss(&mut g, &bound, &cfg, tokens, MaskerKind::Dynamic, 4, 2).unwrap();
            trace.chunks[0].selected.clone()
        };
        let base: Vec<usize> = vec![4, 5, 6, 7, 20, 21, 22, 23];
        let mut other_source = base.clone();
        other_source[..4].copy_from_slice(&[40, 41, 42, 43]);
        let mut other_target = base.clone();
        other_target[4..].copy_from_slice(&[8, 9, 10, 11]);

        // changing the scored chunk leaves the mask alone;
        // changing the chunk before it moves the mask
        assert_eq!(run(&base), run(&other_target));
        assert_ne!(run(&base), run(&other_source));
    }

    #[test]
    fn sft_loss_counts_only_response_positions() {
        let cfg = tiny_config();
        let store = full_store(&cfg, 4, true);
        let pair = &simple_pairs()[2]; // "reverse: ab" -> "ba"

        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let (loss, n) = sft_pair_loss(&mut g, &bound, &cfg, pair, MaskerKind::Dynamic).unwrap();
        assert_eq!(n, 2);
        let got = g.scalar_value(loss);

        let mut g2 = Graph::new();
        let bound2 = store.bind(&mut g2).unwrap();
        let (seq, len_p, len_r) = eval::sft_tokens(pair).unwrap();
        assert_eq!((len_p, len_r), (11, 2));
        let masks = predict_mask_vars(&mut g2, &bound2, &cfg, &seq[..len_p]).unwrap();
        let logits = forward_logits(&mut g2, &bound2, &cfg, &seq, Some(&masks)).unwrap();
        let count: Vec<bool> = (0..seq.len() - 1).map(|p| p == 11 || p == 12).collect();
        let ce = next_token_loss(&mut g2, logits, &seq, &count).unwrap();
        assert_eq!(got, g2.scalar_value(ce));
    }

    #[test]
    fn zero_steps_change_nothing_and_reruns_are_bit_identical() {
        let cfg = tiny_config();
        let docs = tiny_docs();

        let mut store = full_store(&cfg, 8, false);
        let before = store.clone();
        let r = train_cpt(&mut store, &cfg, &docs, &small_tcfg(0, 1), MaskerKind::Dynamic).unwrap();
        assert!(r.losses.is_empty());
        for (a, b) in before.iter().zip(store.iter()) {
            assert_eq!(a.data, b.data);
        }

        let mut s1 = full_store(&cfg, 8, false);
        let mut s2 = full_store(&cfg, 8, false);
        let r1 = train_cpt(&mut s1, &cfg, &docs, &small_tcfg(3, 5), MaskerKind::Dynamic).unwrap();
        let r2 = train_cpt(&mut s2, &cfg, &docs, &small_tcfg(3, 5), MaskerKind::Dynamic).unwrap();
        assert_eq!(r1.losses, r2.losses);
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.data, b.data, "param {} differs", a.name);
        }
    }

    #[test]
    fn full_budget_static_trains_bit_identically_to_dense() {
        // with t = d the static mask is exactly all-ones, so the model
        // parameters must follow the same trajectory as a dense run
        let cfg = ModelConfig {
            d_ffn: 8,
            t_ffn: 8,
            ..tiny_config()
        };
        let docs = tiny_docs();
        let tcfg = small_tcfg(3, 9);

        let mut rng = Rng::new(42);
        let mut dense = ParamStore::new();
        init_model(&mut dense, &cfg, &mut rng);

        let mut rng = Rng::new(42);
        let mut stat = ParamStore::new();
        init_model(&mut stat, &cfg, &mut rng);
        init_static_scores(&mut stat, &cfg, &mut rng);

        for (a, b) in dense.iter().zip(stat.iter()) {
            assert_eq!(a.data, b.data, "init differs for {}", a.name);
        }

        train_cpt(&mut dense, &cfg, &docs, &tcfg, MaskerKind::Dense).unwrap();
        train_cpt(&mut stat, &cfg, &docs, &tcfg, MaskerKind::Static).unwrap();
        for p in dense.iter() {
            assert_eq!(p.data, stat.get(&p.name).data, "{} diverged from dense", p.name);
        }
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let cfg = tiny_config();
        let mut store = full_store(&cfg, 10, false);
        let tcfg = TrainConfig {
            peak_lr: 1e5,
            warmup_frac: 0.0,
            ..small_tcfg(10, 2)
        };
        match train_cpt(&mut store, &cfg, &tiny_docs(), &tcfg, MaskerKind::Dense) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.losses)),
        }
    }

    #[test]
    fn csv_log_matches_the_report() {
        let cfg = tiny_config();
        let mut store = full_store(&cfg, 11, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let tcfg = TrainConfig {
            log_path: Some(path.clone()),
            ..small_tcfg(2, 3)
        };
        let r = train_sft(&mut store, &cfg, &simple_pairs(), &tcfg, MaskerKind::Dynamic).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,stage,loss,grad_norm,lr");
        assert_eq!(lines.len(), 3);
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], i.to_string());
            assert_eq!(cols[1], "sft");
            assert_eq!(cols[2].parse::<f64>().unwrap(), r.losses[i]);
            assert_eq!(cols[4].parse::<f64>().unwrap(), r.lrs[i]);
        }
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let r = chunked_loss_grad_check(1e-5, 1e-4, 1e-7, 13).unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn small_corpus_is_memorized_to_exact_match() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ffn: 48,
            t_ffn: 24,
            vocab: 64,
            max_seq: 64,
            p_layers: 1,
            p_d_model: 16,
            p_heads: 2,
            p_ffn: 32,
            head_hidden: 32,
        };
        let mut store = full_store(&cfg, 12, false);
        let pairs = simple_pairs();
        let tcfg = TrainConfig {
            steps: 300,
            batch: 4,
            peak_lr: 3e-3,
            seed: 6,
            ..TrainConfig::default()
        };
        train_sft(&mut store, &cfg, &pairs, &tcfg, MaskerKind::Dynamic).unwrap();
        let r = evaluate(&store, &cfg, &pairs, &MaskMode::PerInput).unwrap();
        assert!(r.exact_match >= 0.9, "exact match {}", r.exact_match);
        assert!(r.loss < 0.5, "loss {}", r.loss);
    }
}
