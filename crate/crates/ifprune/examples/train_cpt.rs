//! Continued pretraining with the chunked masked objective: the predictor
//! reads the first half of each window, its mask gates the model, and only
//! the second half is scored.
//!
//!   cargo run --release -p ifprune --example train_cpt

use ifprune::datagen::gen_cpt_corpus;
use ifprune::params::{init_model, init_predictor, ModelConfig, ParamStore};
use ifprune::rng::{derive, Rng, INIT};
use ifprune::trainer::{train_cpt, MaskerKind, TrainConfig};

fn main() -> ifprune::Result<()> {
    // a reduced model so the example finishes in about a minute
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 48,
        n_heads: 4,
        d_ffn: 128,
        t_ffn: 48,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(derive(7, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg, &mut rng);
    init_predictor(&mut store, &cfg, &mut rng);
    println!(
        "model: {} layers, d={}, {} of {} FFN channels active per prompt; {} parameters",
        cfg.n_layers,
        cfg.d_model,
        cfg.t_ffn,
        cfg.d_ffn,
        store.total_values()
    );

    let docs = gen_cpt_corpus(256, 7);
    let log = std::env::temp_dir().join("ifprune-train-cpt.csv");
    let tcfg = TrainConfig {
        steps: 300,
        batch: 8,
        seed: 7,
        log_path: Some(log.clone()),
        ..TrainConfig::default()
    };
    println!("training {} steps on {} documents...", tcfg.steps, docs.len());
    let report = train_cpt(&mut store, &cfg, &docs, &tcfg, MaskerKind::Dynamic)?;

    for (i, chunk) in report.losses.chunks(50).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("  steps {:>3}..{:<3} mean loss {:.4}", i * 50, i * 50 + chunk.len(), mean);
    }
    let drop = 1.0 - report.final_loss() / report.first_loss();
    println!(
        "loss {:.4} -> {:.4} ({:.0}% decrease); log at {}",
        report.first_loss(),
        report.final_loss(),
        100.0 * drop,
        log.display()
    );
    assert!(drop > 0.2, "training should make clear progress");
    Ok(())
}
