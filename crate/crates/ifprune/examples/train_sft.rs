//! Instruction tuning: the mask comes from the prompt alone, the loss from
//! the response alone. Shows loss and exact-match before and after.
//!
//!   cargo run --release -p ifprune --example train_sft

use ifprune::datagen::gen_sft_corpus;
use ifprune::params::{init_model, init_predictor, ModelConfig, ParamStore};
use ifprune::rng::{derive, Rng, INIT};
use ifprune::trainer::{evaluate, train_sft, MaskMode, MaskerKind, TrainConfig};

fn main() -> ifprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 48,
        n_heads: 4,
        d_ffn: 128,
        t_ffn: 48,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(derive(9, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg, &mut rng);
    init_predictor(&mut store, &cfg, &mut rng);

    // 1000 steps of batch 8 is about two epochs here, so held-out loss
    // tracks real generalization rather than memorization
    let train_pairs = gen_sft_corpus(4000, 9);
    let eval_pairs = gen_sft_corpus(60, 10); // held out: different seed

    let before = evaluate(&store, &cfg, &eval_pairs, &MaskMode::PerInput)?;
    println!(
        "before: loss {:.4}, exact match {:.2}",
        before.loss, before.exact_match
    );

    let tcfg = TrainConfig {
        steps: 1000,
        batch: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    println!("tuning {} steps on {} pairs...", tcfg.steps, train_pairs.len());
    let report = train_sft(&mut store, &cfg, &train_pairs, &tcfg, MaskerKind::Dynamic)?;
    println!(
        "train loss {:.4} -> {:.4}",
        report.first_loss(),
        report.final_loss()
    );

    let after = evaluate(&store, &cfg, &eval_pairs, &MaskMode::PerInput)?;
    println!(
        "after:  loss {:.4}, exact match {:.2}",
        after.loss, after.exact_match
    );
    assert!(after.loss < before.loss * 0.7);
    Ok(())
}
