//! The input-independent baseline: one learned score table picks a single
//! sub-network for every input. Same budget, same objective, no predictor.
//!
//!   cargo run --release -p ifprune --example train_static_baseline

use ifprune::datagen::gen_cpt_corpus;
use ifprune::params::{init_model, init_static_scores, ModelConfig, ParamStore};
use ifprune::predictor::static_mask_set;
use ifprune::rng::{derive, Rng, INIT};
use ifprune::trainer::{train_cpt, MaskerKind, TrainConfig};

fn main() -> ifprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 48,
        n_heads: 4,
        d_ffn: 128,
        t_ffn: 48,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(derive(11, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg, &mut rng);
    init_static_scores(&mut store, &cfg, &mut rng);

    let before = static_mask_set(&store, &cfg)?;
    let docs = gen_cpt_corpus(256, 11);
    let tcfg = TrainConfig {
        steps: 300,
        batch: 8,
        seed: 11,
        ..TrainConfig::default()
    };
    println!("training the static baseline for {} steps...", tcfg.steps);
    let report = train_cpt(&mut store, &cfg, &docs, &tcfg, MaskerKind::Static)?;
    println!(
        "loss {:.4} -> {:.4}",
        report.first_loss(),
        report.final_loss()
    );

    // the score table moved: the selected sub-network changed during training
    let after = static_mask_set(&store, &cfg)?;
    for l in 0..cfg.n_layers {
        let kept: usize = before.selected[l]
            .iter()
            .filter(|c| after.selected[l].contains(c))
            .count();
        println!(
            "layer {l}: {kept}/{} of the initially selected channels survived",
            cfg.t_ffn
        );
    }
    Ok(())
}
