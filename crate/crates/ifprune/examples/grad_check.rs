//! Check analytic gradients against finite differences, from single ops up
//! to the whole chunked training objective.
//!
//!   cargo run --release -p ifprune --example grad_check

use ifprune::softtopk::{soft_topk, soft_topk_backward};
use ifprune::trainer::chunked_loss_grad_check;

fn main() -> ifprune::Result<()> {
    // the interesting op first: the top-k relaxation in isolation
    let z = vec![0.9, -0.3, 0.4, 0.1, -0.8, 0.6];
    let t = 3;
    let row = soft_topk(&z, t)?;
    println!("scores    {z:?}");
    println!("selected  {:?}", row.selected);
    println!("gates     {:?}", row.lambda.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
    println!("gate sum  {:.12} (budget {t})", row.lambda.iter().sum::<f64>());

    let upstream = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
    let analytic = soft_topk_backward(&z, t, &upstream)?;
    let eps = 1e-6;
    let mut worst = 0.0_f64;
    for j in 0..z.len() {
        let mut zp = z.clone();
        zp[j] += eps;
        let up = soft_topk(&zp, t)?;
        let mut zm = z.clone();
        zm[j] -= eps;
        let dn = soft_topk(&zm, t)?;
        let mut numeric = 0.0;
        for k in 0..z.len() {
            numeric += upstream[k] * (up.mask[k] - dn.mask[k]) / (2.0 * eps);
        }
        worst = worst.max((analytic[j] - numeric).abs());
    }
    println!("soft top-k backward vs finite differences: max abs err {worst:.3e}\n");

    // then every parameter of a small model + predictor through the
    // chunked objective, masks included
    println!("checking the full objective (every parameter, ~5k coordinates)...");
    let report = chunked_loss_grad_check(1e-5, 1e-4, 1e-7, 42)?;
    for (name, err) in &report.per_param {
        println!("  {name:<28} max rel err {err:.3e}");
    }
    println!(
        "overall max rel err {:.3e} (tol {:.1e}): {}",
        report.max_rel_err,
        report.tol,
        if report.pass { "PASS" } else { "FAIL" }
    );
    assert!(report.pass);
    Ok(())
}
