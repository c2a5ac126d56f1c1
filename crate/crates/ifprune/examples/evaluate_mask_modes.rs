//! One trained model, four ways to choose its mask at inference time:
//! the full network, a fresh mask per input, one mask per task, and a
//! fixed hard mask loaded from text.
//!
//!   cargo run --release -p ifprune --example evaluate_mask_modes

use ifprune::datagen::{encode, gen_sft_corpus, task_prompt, Domain};
use ifprune::params::{init_model, init_predictor, ModelConfig, ParamStore};
use ifprune::predictor::{format_selected, hard_mask_rows, parse_selected, predict_mask_set};
use ifprune::rng::{derive, Rng, INIT};
use ifprune::trainer::{evaluate, train_sft, MaskMode, MaskerKind, TrainConfig};

fn main() -> ifprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ffn: 64,
        t_ffn: 24,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(derive(13, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg, &mut rng);
    init_predictor(&mut store, &cfg, &mut rng);

    // enough pairs that 400 steps of batch 8 is about two epochs; an
    // overtrained model would flatten the differences between the modes
    let train_pairs = gen_sft_corpus(1600, 13);
    let eval_pairs = gen_sft_corpus(45, 14);
    let tcfg = TrainConfig {
        steps: 400,
        batch: 8,
        seed: 13,
        ..TrainConfig::default()
    };
    println!("tuning {} steps so the masks mean something...", tcfg.steps);
    train_sft(&mut store, &cfg, &train_pairs, &tcfg, MaskerKind::Dynamic)?;

    for (name, mode) in [
        ("dense (no mask)", MaskMode::Dense),
        ("per input", MaskMode::PerInput),
        ("per task", MaskMode::PerTask),
    ] {
        let r = evaluate(&store, &cfg, &eval_pairs, &mode)?;
        println!("{name:<16} loss {:.4}  exact match {:.2}", r.loss, r.exact_match);
    }

    // a mask can also live in a text file: selected channels per layer
    let masks = predict_mask_set(&store, &cfg, &encode(&task_prompt(Domain::Arith))?)?;
    let text = format_selected(&masks.selected);
    println!("\nmask file for {:?}:\n{text}", task_prompt(Domain::Arith));
    let rows = hard_mask_rows(&parse_selected(&text)?, &cfg)?;
    let r = evaluate(&store, &cfg, &eval_pairs, &MaskMode::FromRows(rows))?;
    println!("fixed hard mask  loss {:.4}  exact match {:.2}", r.loss, r.exact_match);
    Ok(())
}
