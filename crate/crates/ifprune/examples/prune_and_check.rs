//! Materialize the sub-network a prompt selects as a genuinely smaller
//! model, then verify it is the masked parent in disguise: identical logits
//! to float round-off, in memory and through a 32-bit checkpoint.
//!
//!   cargo run --release -p ifprune --example prune_and_check

use ifprune::checkpoint;
use ifprune::datagen::encode;
use ifprune::params::{init_model, init_predictor, ModelConfig, ParamStore};
use ifprune::predictor::predict_mask_set;
use ifprune::pruner::{
    check_equivalence, mask_set_from_config, materialize, pruned_config_entries, random_probe_seqs,
};
use ifprune::rng::{derive, Rng, INIT};

fn main() -> ifprune::Result<()> {
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(derive(21, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg, &mut rng);
    init_predictor(&mut store, &cfg, &mut rng);
    // random score head so the mask actually depends on the prompt
    for name in ["head.w2", "head.b2"] {
        for v in &mut store.get_mut(name).data {
            *v = rng.normal_scaled(0.3);
        }
    }

    let prompt = "task cipher";
    let masks = predict_mask_set(&store, &cfg, &encode(prompt)?)?;
    println!(
        "prompt {:?} keeps {} of {} channels per layer",
        prompt, masks.t, cfg.d_ffn
    );

    let (pruned, pcfg) = materialize(&store, &cfg, &masks)?;
    let full_params = store.iter().filter(|p| p.name.starts_with("model.")).map(|p| p.data.len()).sum::<usize>();
    println!(
        "model parameters {} -> {}",
        full_params,
        pruned.total_values()
    );

    let seqs = random_probe_seqs(&cfg, 100, 24, 21);
    let in_mem = check_equivalence(&store, &cfg, &masks.rows, &pruned, &pcfg, &seqs, 1e-9)?;
    println!(
        "in memory: {} probes, max |masked - pruned| = {:.3e} (tol 1e-9) {}",
        in_mem.trials,
        in_mem.max_abs_diff,
        if in_mem.pass { "PASS" } else { "FAIL" }
    );
    assert!(in_mem.pass);

    // export to a 32-bit checkpoint and verify the reloaded artifact
    let path = std::env::temp_dir().join("ifprune-pruned.ckpt");
    let mut config = pcfg.to_kv();
    config.extend(pruned_config_entries(&masks, Some(prompt)));
    checkpoint::save_store(&path, &config, &pruned)?;
    let loaded = checkpoint::load(&path)?;
    let restored_masks = mask_set_from_config(&loaded.config, &cfg)?;
    let restored = loaded.into_store();
    let round_trip =
        check_equivalence(&store, &cfg, &restored_masks.rows, &restored, &pcfg, &seqs, 1e-6)?;
    println!(
        "through {}: max diff = {:.3e} (tol 1e-6) {}",
        path.display(),
        round_trip.max_abs_diff,
        if round_trip.pass { "PASS" } else { "FAIL" }
    );
    assert!(round_trip.pass);
    Ok(())
}
