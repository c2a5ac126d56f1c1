//! Subcommand layer behind the `ifprune` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config problem,
//! 3 numeric failure (divergence, tolerance exceeded, non-finite values).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datagen::{self, Domain};
use crate::params::{init_model, init_predictor, init_static_scores, ModelConfig, ParamStore};
use crate::predictor;
use crate::pruner;
use crate::rng::{derive, Rng, INIT};
use crate::trainer::{self, MaskMode, MaskerKind, TrainConfig};
use crate::{checkpoint, kvconfig, overlap, Error, Result};

#[derive(Parser)]
#[command(
    name = "ifprune",
    about = "Prompt-conditioned FFN pruning: data, training, masks, pruning, analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpora (documents and instruction pairs).
    GenData(GenDataArgs),
    /// Continued pretraining with the chunked masked objective.
    TrainCpt(TrainArgs),
    /// Instruction tuning with prompt-derived masks.
    TrainSft(TrainArgs),
    /// Train the static-mask baseline (convenience for --masker static).
    TrainStatic(TrainStaticArgs),
    /// Loss and exact-match of a checkpoint under a mask mode.
    Eval(EvalArgs),
    /// Print or save the channels a prompt selects.
    PredictMask(PredictMaskArgs),
    /// Materialize the sub-network a prompt selects as a smaller model.
    ExportPruned(ExportPrunedArgs),
    /// Verify a pruned export against its masked parent.
    CheckEquiv(CheckEquivArgs),
    /// Mask overlap matrices across domains, with significance tests.
    Overlap(OverlapArgs),
    /// Finite-difference check of the full training objective.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// key=value file overriding model.* and predictor.* dimensions
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory for cpt.tsv and sft.tsv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    docs: usize,
    #[arg(long, default_value_t = 360)]
    pairs: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus file from gen-data (cpt.tsv or sft.tsv)
    #[arg(long)]
    data: PathBuf,
    /// Directory for the checkpoint and the training log
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from
    #[arg(long, conflicts_with = "from_scratch")]
    init_from: Option<PathBuf>,
    /// Start from freshly initialized parameters
    #[arg(long)]
    from_scratch: bool,
    /// dynamic | static | dense (default: the checkpoint's masker, else dynamic)
    #[arg(long)]
    masker: Option<String>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
}

#[derive(Args)]
struct TrainStaticArgs {
    /// Which stage to run with the static masker
    #[arg(long, value_parser = ["cpt", "sft"])]
    stage: String,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// Instruction pairs file (sft.tsv)
    #[arg(long)]
    data: PathBuf,
    /// dense | per_input | per_task | static
    #[arg(long, default_value = "per_input")]
    mask_mode: String,
    /// Predict one mask from this prompt and use it for every example
    #[arg(long)]
    task_prompt: Option<String>,
    /// Hard mask from a predict-mask output file
    #[arg(long, conflicts_with = "task_prompt")]
    mask_file: Option<PathBuf>,
    /// Also write the report line to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictMaskArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportPrunedArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckEquivArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// The full (maskable) checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// The pruned export to verify
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct OverlapArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory for the per-layer and mean CSV matrices
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    prompts_per_domain: usize,
    #[arg(long, default_value_t = 1000)]
    n_perm: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    abs_tol: f64,
}

/// Parse and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } | Error::Diverged { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainCpt(a) => train(a, Stage::Cpt, None),
        Cmd::TrainSft(a) => train(a, Stage::Sft, None),
        Cmd::TrainStatic(a) => {
            let stage = if a.stage == "cpt" { Stage::Cpt } else { Stage::Sft };
            train(a.train, stage, Some(MaskerKind::Static))
        }
        Cmd::Eval(a) => eval(a),
        Cmd::PredictMask(a) => predict_mask(a),
        Cmd::ExportPruned(a) => export_pruned(a),
        Cmd::CheckEquiv(a) => check_equiv(a),
        Cmd::Overlap(a) => run_overlap(a),
        Cmd::GradCheck(a) => grad_check(a),
    }
}

// ── shared helpers ─────────────────────────────────────────────────────

fn load_model_config(path: Option<&PathBuf>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    if let Some(p) = path {
        let kv = kvconfig::parse(&std::fs::read_to_string(p)?)?;
        cfg.apply_overrides(&kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fresh_store(cfg: &ModelConfig, kind: MaskerKind, seed: u64) -> ParamStore {
    let mut rng = Rng::new(derive(seed, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, cfg, &mut rng);
    match kind {
        MaskerKind::Dynamic => init_predictor(&mut store, cfg, &mut rng),
        MaskerKind::Static => init_static_scores(&mut store, cfg, &mut rng),
        MaskerKind::Dense => {}
    }
    store
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore, ModelConfig, BTreeMap<String, String>)> {
    let ck = checkpoint::load(path)?;
    let cfg = ModelConfig::from_kv(&ck.config)?;
    let config = ck.config.clone();
    Ok((ck.into_store(), cfg, config))
}

fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut config = cfg.to_kv();
    for (k, v) in extra {
        config.insert(k.to_string(), v.clone());
    }
    checkpoint::save_store(path, &config, store)
}

// ── subcommands ────────────────────────────────────────────────────────

fn gen_data(a: GenDataArgs) -> Result<i32> {
    std::fs::create_dir_all(&a.out)?;
    let docs = datagen::gen_cpt_corpus(a.docs, a.common.seed);
    let pairs = datagen::gen_sft_corpus(a.pairs, a.common.seed);
    let cpt_path = a.out.join("cpt.tsv");
    let sft_path = a.out.join("sft.tsv");
    datagen::write_cpt_corpus(&cpt_path, &docs)?;
    datagen::write_sft_corpus(&sft_path, &pairs)?;
    println!(
        "wrote {} documents to {} and {} pairs to {}",
        docs.len(),
        cpt_path.display(),
        pairs.len(),
        sft_path.display()
    );
    Ok(0)
}

enum Stage {
    Cpt,
    Sft,
}

/// Check the store carries what the masker needs; a friendlier failure than
/// a missing-parameter panic deep in the forward pass.
fn validate_kind(store: &ParamStore, kind: MaskerKind) -> Result<()> {
    let need = match kind {
        MaskerKind::Dynamic => Some(("predictor.embed", "a dynamic predictor")),
        MaskerKind::Static => Some(("static.scores", "a static score table")),
        MaskerKind::Dense => None,
    };
    if let Some((param, what)) = need {
        if !store.contains(param) {
            return Err(Error::Config {
                field: "masker".to_string(),
                msg: format!("checkpoint has no {what} ({param} missing)"),
            });
        }
    }
    Ok(())
}

fn train(a: TrainArgs, stage: Stage, force_kind: Option<MaskerKind>) -> Result<i32> {
    let requested = match force_kind {
        Some(k) => Some(k),
        None => a.masker.as_deref().map(MaskerKind::parse).transpose()?,
    };
    if matches!(stage, Stage::Sft) && a.init_from.is_none() && !a.from_scratch {
        eprintln!("error: train-sft needs --init-from <checkpoint> or --from-scratch");
        return Ok(1);
    }
    let (store, cfg, kind) = match &a.init_from {
        Some(p) => {
            if a.common.config.is_some() {
                return Err(Error::Config {
                    field: "config".to_string(),
                    msg: "--config cannot override a checkpoint's dimensions; \
                          use --from-scratch"
                        .to_string(),
                });
            }
            let (store, cfg, config) = load_checkpoint(p)?;
            let kind = match requested {
                Some(k) => k,
                None => match config.get("train.masker") {
                    Some(saved) => MaskerKind::parse(saved)?,
                    None => MaskerKind::Dynamic,
                },
            };
            (store, cfg, kind)
        }
        None => {
            let kind = requested.unwrap_or(MaskerKind::Dynamic);
            let cfg = load_model_config(a.common.config.as_ref())?;
            (fresh_store(&cfg, kind, a.common.seed), cfg, kind)
        }
    };
    validate_kind(&store, kind)?;
    train_with(a, stage, kind, store, cfg)
}

fn train_with(
    a: TrainArgs,
    stage: Stage,
    kind: MaskerKind,
    mut store: ParamStore,
    cfg: ModelConfig,
) -> Result<i32> {
    std::fs::create_dir_all(&a.out)?;
    let stage_name = match stage {
        Stage::Cpt => "cpt",
        Stage::Sft => "sft",
    };
    let tcfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        peak_lr: a.lr,
        seed: a.common.seed,
        log_path: Some(a.out.join(format!("{stage_name}_log.csv"))),
        ..TrainConfig::default()
    };
    let report = match stage {
        Stage::Cpt => {
            let docs = datagen::read_cpt_corpus(&a.data)?;
            trainer::train_cpt(&mut store, &cfg, &docs, &tcfg, kind)?
        }
        Stage::Sft => {
            let pairs = datagen::read_sft_corpus(&a.data)?;
            trainer::train_sft(&mut store, &cfg, &pairs, &tcfg, kind)?
        }
    };
    let ckpt_path = a.out.join(format!("{stage_name}.ckpt"));
    save_checkpoint(
        &ckpt_path,
        &cfg,
        &store,
        &[
            ("train.masker", kind.name().to_string()),
            ("train.stage", stage_name.to_string()),
            ("train.steps", tcfg.steps.to_string()),
            ("train.seed", tcfg.seed.to_string()),
        ],
    )?;
    println!(
        "{} {} steps: loss {:.4} -> {:.4}; saved {}",
        stage_name,
        tcfg.steps,
        report.first_loss(),
        report.final_loss(),
        ckpt_path.display()
    );
    Ok(0)
}

fn require_param(store: &ParamStore, param: &str, what: &str) -> Result<()> {
    if !store.contains(param) {
        return Err(Error::Config {
            field: "mask-mode".to_string(),
            msg: format!("checkpoint has no {what} ({param} missing)"),
        });
    }
    Ok(())
}

fn eval_mode(a: &EvalArgs, store: &ParamStore, cfg: &ModelConfig) -> Result<MaskMode> {
    if let Some(prompt) = &a.task_prompt {
        require_param(store, "predictor.embed", "a dynamic predictor")?;
        let tokens = datagen::encode(prompt)?;
        let rows = predictor::predict_mask_set(store, cfg, &tokens)?.rows;
        return Ok(MaskMode::FromRows(rows));
    }
    if let Some(path) = &a.mask_file {
        let text = std::fs::read_to_string(path)?;
        let selected = predictor::parse_selected(&text)?;
        let rows = predictor::hard_mask_rows(&selected, cfg)?;
        return Ok(MaskMode::FromRows(rows));
    }
    let mode = MaskMode::parse(&a.mask_mode)?;
    match mode {
        MaskMode::PerInput | MaskMode::PerTask => {
            require_param(store, "predictor.embed", "a dynamic predictor")?
        }
        MaskMode::Static => require_param(store, "static.scores", "a static score table")?,
        _ => {}
    }
    Ok(mode)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let (store, cfg, _) = load_checkpoint(&a.ckpt)?;
    let pairs = datagen::read_sft_corpus(&a.data)?;
    let mode = eval_mode(&a, &store, &cfg)?;
    let r = trainer::evaluate(&store, &cfg, &pairs, &mode)?;
    let line = format!(
        "n={} loss={:.6} exact_match={:.4}",
        r.n, r.loss, r.exact_match
    );
    println!("{line}");
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{line}\n"))?;
    }
    Ok(0)
}

fn predict_mask(a: PredictMaskArgs) -> Result<i32> {
    let (store, cfg, _) = load_checkpoint(&a.ckpt)?;
    require_param(&store, "predictor.embed", "a dynamic predictor")?;
    let tokens = datagen::encode(&a.prompt)?;
    let masks = predictor::predict_mask_set(&store, &cfg, &tokens)?;
    let text = predictor::format_selected(&masks.selected);
    match &a.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn export_pruned(a: ExportPrunedArgs) -> Result<i32> {
    let (store, cfg, _) = load_checkpoint(&a.ckpt)?;
    require_param(&store, "predictor.embed", "a dynamic predictor")?;
    let tokens = datagen::encode(&a.prompt)?;
    let masks = predictor::predict_mask_set(&store, &cfg, &tokens)?;
    let (pruned, pcfg) = pruner::materialize(&store, &cfg, &masks)?;
    let mut config = pcfg.to_kv();
    config.extend(pruner::pruned_config_entries(&masks, Some(&a.prompt)));
    checkpoint::save_store(&a.out, &config, &pruned)?;
    println!(
        "pruned {} -> {} channels per layer; saved {}",
        cfg.d_ffn,
        pcfg.d_ffn,
        a.out.display()
    );
    Ok(0)
}

fn check_equiv(a: CheckEquivArgs) -> Result<i32> {
    let (full_store, full_cfg, _) = load_checkpoint(&a.ckpt)?;
    let pruned_ck = checkpoint::load(&a.pruned)?;
    let pruned_cfg = ModelConfig::from_kv(&pruned_ck.config)?;
    let masks = pruner::mask_set_from_config(&pruned_ck.config, &full_cfg)?;
    let pruned_store = pruned_ck.into_store();
    let seqs = pruner::random_probe_seqs(&full_cfg, a.trials, full_cfg.max_seq.min(24), a.common.seed);
    let r = pruner::check_equivalence(
        &full_store,
        &full_cfg,
        &masks.rows,
        &pruned_store,
        &pruned_cfg,
        &seqs,
        a.tol,
    )?;
    println!(
        "{} trials, max |masked - pruned| = {:.3e} (tol {:.1e})",
        r.trials, r.max_abs_diff, r.tol
    );
    if r.pass {
        Ok(0)
    } else {
        eprintln!("error: pruned model deviates from the masked parent");
        Ok(3)
    }
}

fn run_overlap(a: OverlapArgs) -> Result<i32> {
    let (store, cfg, _) = load_checkpoint(&a.ckpt)?;
    require_param(&store, "predictor.embed", "a dynamic predictor")?;
    let mut domains = Vec::new();
    for (di, d) in Domain::BASE.iter().enumerate() {
        let mut rng = Rng::new(derive(a.common.seed, 0x0D0 + di as u64));
        let mut masks = Vec::with_capacity(a.prompts_per_domain);
        for i in 0..a.prompts_per_domain {
            let pair = datagen::gen_pair(*d, i % 3, &mut rng);
            let tokens = datagen::encode(&pair.prompt)?;
            masks.push(predictor::predict_mask_set(&store, &cfg, &tokens)?);
        }
        domains.push(overlap::DomainMasks {
            label: d.name().to_string(),
            masks,
        });
    }
    let paths = overlap::write_overlap_reports(&a.out, &domains)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    let last = cfg.n_layers - 1;
    let within = overlap::within_vs_cross_test(&domains, last, a.n_perm, a.common.seed)?;
    println!(
        "within vs cross (layer {last}): diff {:.4}, p = {:.4}",
        within.observed, within.p_value
    );
    let depth = overlap::first_vs_last_layer_test(&domains, a.n_perm, a.common.seed)?;
    println!(
        "first vs last layer: diff {:.4}, p = {:.4}",
        depth.observed, depth.p_value
    );
    Ok(0)
}

fn grad_check(a: GradCheckArgs) -> Result<i32> {
    let r = trainer::chunked_loss_grad_check(a.eps, a.rel_tol, a.abs_tol, a.common.seed)?;
    for (name, err) in &r.per_param {
        println!("{name}: max rel err {err:.3e}");
    }
    println!("overall max rel err {:.3e} (tol {:.1e})", r.max_rel_err, r.tol);
    if r.pass {
        println!("gradients agree with finite differences");
        Ok(0)
    } else {
        eprintln!("error: analytic and numeric gradients disagree");
        Ok(3)
    }
}
