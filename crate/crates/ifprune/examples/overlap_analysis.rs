//! How much do the sub-networks selected by different prompts share?
//! Trains briefly so the masks specialize, then compares selected channel
//! sets within and across task domains, layer by layer.
//!
//!   cargo run --release -p ifprune --example overlap_analysis

use ifprune::datagen::{encode, gen_pair, gen_sft_corpus, Domain};
use ifprune::overlap::{
    first_vs_last_layer_test, mean_overlap_matrix, overlap_matrix, within_vs_cross_test,
    write_overlap_reports, DomainMasks, OverlapMatrix,
};
use ifprune::params::{init_model, init_predictor, ModelConfig, ParamStore};
use ifprune::predictor::predict_mask_set;
use ifprune::rng::{derive, Rng, INIT};
use ifprune::trainer::{train_sft, MaskerKind, TrainConfig};

fn print_matrix(title: &str, m: &OverlapMatrix) {
    println!("{title}");
    print!("  {:<8}", "");
    for l in &m.labels {
        print!("{l:>8}");
    }
    println!();
    for (label, row) in m.labels.iter().zip(&m.cells) {
        print!("  {label:<8}");
        for c in row {
            match c {
                Some(v) => print!("{v:>8.3}"),
                None => print!("{:>8}", "-"),
            }
        }
        println!();
    }
}

fn main() -> ifprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 32,
        n_heads: 4,
        d_ffn: 96,
        t_ffn: 32,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(derive(17, INIT));
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg, &mut rng);
    init_predictor(&mut store, &cfg, &mut rng);

    let tcfg = TrainConfig {
        steps: 500,
        batch: 8,
        seed: 17,
        ..TrainConfig::default()
    };
    println!("tuning {} steps so prompts specialize their masks...\n", tcfg.steps);
    train_sft(&mut store, &cfg, &gen_sft_corpus(2000, 17), &tcfg, MaskerKind::Dynamic)?;

    // 16 fresh prompts per domain
    let mut domains = Vec::new();
    for (di, d) in Domain::BASE.iter().enumerate() {
        let mut prng = Rng::new(derive(99, di as u64));
        let mut masks = Vec::new();
        for i in 0..16 {
            let pair = gen_pair(*d, i % 3, &mut prng);
            masks.push(predict_mask_set(&store, &cfg, &encode(&pair.prompt)?)?);
        }
        domains.push(DomainMasks {
            label: d.name().to_string(),
            masks,
        });
    }

    for l in 0..cfg.n_layers {
        print_matrix(&format!("layer {l} overlap:"), &overlap_matrix(&domains, l)?);
    }
    print_matrix("mean over layers:", &mean_overlap_matrix(&domains)?);

    let last = cfg.n_layers - 1;
    let w = within_vs_cross_test(&domains, last, 1000, 17)?;
    println!(
        "\nwithin-domain minus cross-domain overlap at layer {last}: {:+.4} (p = {:.4})",
        w.observed, w.p_value
    );
    let f = first_vs_last_layer_test(&domains, 1000, 17)?;
    println!(
        "first-layer minus last-layer overlap: {:+.4} (p = {:.4})",
        f.observed, f.p_value
    );

    let dir = std::env::temp_dir().join("ifprune-overlap");
    let paths = write_overlap_reports(&dir, &domains)?;
    println!("\nwrote {} CSV files under {}", paths.len(), dir.display());
    Ok(())
}
