//! Budgeted top-k relaxation.
//!
//! Given scores `z` over `d` channels and a budget `t`, find the threshold
//! `tau` with
//!
//! ```text
//! sum_k min(1, exp(z_k - tau)) = t
//! ```
//!
//! and emit `lambda_k = min(1, exp(z_k - tau))` as soft channel gates. The
//! mask keeps `lambda` on the `t` highest-score channels and zeroes the rest,
//! so exactly `t` channels are active while the total gate mass stays pinned
//! to the budget. The backward pass treats the selected set as fixed
//! (straight-through) but differentiates `tau` exactly through the budget
//! constraint, so score gradients feel how crowding one channel up pushes the
//! shared threshold onto the others.
//!
//! All functions here are pure and safe to call concurrently on distinct
//! rows; the only shared state is the boundary-tie diagnostics counter.

use crate::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

/// Absolute tolerance on the budget residual at the returned threshold.
pub const BUDGET_TOL: f64 = 1e-10;
/// Bisection stops once the bracket is this narrow (and the residual is met).
const WIDTH_TOL: f64 = 1e-12;
const MAX_ITERS: usize = 200;
/// Two gate values this close at the selection boundary count as a tie.
pub const TIE_GUARD: f64 = 1e-9;

static BOUNDARY_TIES: AtomicU64 = AtomicU64::new(0);

/// Number of soft_topk calls so far whose t-th and (t+1)-th gate values were
/// within [`TIE_GUARD`] of each other. Ties make the selection (and therefore
/// the straight-through gradient) sensitive to the index tie-break; the count
/// is diagnostic only, the gradient is still returned.
pub fn boundary_tie_count() -> u64 {
    BOUNDARY_TIES.load(Ordering::Relaxed)
}

pub fn reset_boundary_tie_count() {
    BOUNDARY_TIES.store(0, Ordering::Relaxed);
}

/// One relaxed top-k row: gates, selection, mask, threshold.
#[derive(Debug, Clone)]
pub struct TopKRow {
    /// min(1, exp(z - tau)) for every channel; sums to t.
    pub lambda: Vec<f64>,
    /// Indices of the t largest gates, ascending. Ties break to the lowest index.
    pub selected: Vec<usize>,
    /// lambda on selected channels, 0 elsewhere.
    pub mask: Vec<f64>,
    pub tau: f64,
}

fn validate(z: &[f64], t: usize) -> Result<()> {
    let d = z.len();
    if t == 0 || t > d {
        return Err(Error::BadBudget { t, d });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "soft_topk" });
    }
    Ok(())
}

fn budget_residual(z: &[f64], tau: f64, t: usize) -> f64 {
    z.iter()
        .map(|&zk| (zk - tau).exp().min(1.0))
        .sum::<f64>()
        - t as f64
}

/// Solve for the threshold tau with sum_k min(1, exp(z_k - tau)) = t.
///
/// The residual is monotone decreasing in tau and the bracket
/// [min(z) - ln d, max(z) + ln d] always straddles the root, so plain
/// bisection converges; it runs until the bracket is narrower than 1e-12 and
/// the residual is within [`BUDGET_TOL`], capped at 200 iterations.
pub fn solve_tau(z: &[f64], t: usize) -> Result<f64> {
    validate(z, t)?;
    let d = z.len();
    let min_z = z.iter().cloned().fold(f64::INFINITY, f64::min);
    if t == d {
        // Everything saturates at exactly min(z): each gate is exp(>=0)
        // capped to 1, so the budget holds with zero residual.
        return Ok(min_z);
    }
    let max_z = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ln_d = (d as f64).ln();
    let mut lo = min_z - ln_d; // residual >= 0 here (all gates saturate)
    let mut hi = max_z + ln_d; // residual <= 0 here (total mass <= 1 <= t)
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_ITERS {
        mid = 0.5 * (lo + hi);
        let r = budget_residual(z, mid, t);
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= WIDTH_TOL && r.abs() <= BUDGET_TOL {
            break;
        }
    }
    Ok(mid)
}

/// Indices ordered by gate value descending, ties broken by lower index.
/// Since lambda is a monotone transform of z this is also a z-ordering.
fn ranked_indices(lambda: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lambda.len()).collect();
    idx.sort_by(|&a, &b| {
        lambda[b]
            .partial_cmp(&lambda[a])
            .expect("gates are finite")
            .then(a.cmp(&b))
    });
    idx
}

/// Full relaxed top-k: threshold, gates, selection, mask.
pub fn soft_topk(z: &[f64], t: usize) -> Result<TopKRow> {
    let tau = solve_tau(z, t)?;
    let d = z.len();
    let lambda: Vec<f64> = z.iter().map(|&zk| (zk - tau).exp().min(1.0)).collect();
    let ranked = ranked_indices(&lambda);
    if t < d && (lambda[ranked[t - 1]] - lambda[ranked[t]]).abs() < TIE_GUARD {
        BOUNDARY_TIES.fetch_add(1, Ordering::Relaxed);
    }
    let mut selected: Vec<usize> = ranked[..t].to_vec();
    selected.sort_unstable();
    let mut mask = vec![0.0; d];
    for &i in &selected {
        mask[i] = lambda[i];
    }
    Ok(TopKRow {
        lambda,
        selected,
        mask,
        tau,
    })
}

/// Gradient of `sum_k upstream_k * mask_k` with respect to z.
///
/// With A the unsaturated set (lambda < 1) and S the selection:
///
/// ```text
/// dtau/dz_j    = lambda_j / sum_{a in A} lambda_a      for j in A, else 0
/// dlam_k/dz_j  = lambda_k (delta_kj - dtau/dz_j)       for k in A, else 0
/// dz_j         = sum_{k in S} upstream_k * dlam_k/dz_j
/// ```
///
/// The selection itself is held fixed (straight-through), so upstream signal
/// on unselected channels is dropped before the Jacobian is applied.
pub fn soft_topk_backward(z: &[f64], t: usize, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != z.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_topk_backward",
            lhs: vec![z.len()],
            rhs: vec![upstream.len()],
        });
    }
    let row = soft_topk(z, t)?;
    Ok(backward_from_row(&row, upstream))
}

/// Same gradient, reusing an already-solved row (the graph op path).
pub fn backward_from_row(row: &TopKRow, upstream: &[f64]) -> Vec<f64> {
    let d = row.lambda.len();
    debug_assert_eq!(upstream.len(), d);
    let unsaturated = |k: usize| row.lambda[k] < 1.0;
    let sum_a: f64 = (0..d).filter(|&k| unsaturated(k)).map(|k| row.lambda[k]).sum();
    let mut dz = vec![0.0; d];
    if sum_a == 0.0 {
        // t = d: every gate saturated, locally constant in z.
        return dz;
    }
    // c = sum over selected unsaturated k of upstream_k * lambda_k; this is
    // the total signal routed through the shared threshold.
    let mut c = 0.0;
    let mut in_s = vec![false; d];
    for &k in &row.selected {
        in_s[k] = true;
        if unsaturated(k) {
            c += upstream[k] * row.lambda[k];
        }
    }
    for j in 0..d {
        if !unsaturated(j) {
            continue;
        }
        let direct = if in_s[j] { upstream[j] * row.lambda[j] } else { 0.0 };
        dz[j] = direct - c * row.lambda[j] / sum_a;
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn descending_scores_select_leading_pair() {
        let row = soft_topk(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(row.selected, vec![0, 1]);
        let total: f64 = row.lambda.iter().sum();
        assert_close(total, 2.0, 1e-10);
        for (i, &m) in row.mask.iter().enumerate() {
            if row.selected.contains(&i) {
                assert_eq!(m, row.lambda[i]);
            } else {
                assert_eq!(m, 0.0);
            }
        }
    }

    #[test]
    fn full_budget_on_equal_scores_gives_all_ones() {
        let row = soft_topk(&[0.7; 5], 5).unwrap();
        assert!(row.tau <= 0.7);
        assert!(row.lambda.iter().all(|&l| l == 1.0));
        assert_eq!(row.selected, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unique_maximum_wins_budget_one() {
        let row = soft_topk(&[0.1, -0.3, 1.9, 0.4], 1).unwrap();
        assert_eq!(row.selected, vec![2]);
    }

    #[test]
    fn degenerate_budgets_rejected() {
        assert!(matches!(
            soft_topk(&[1.0, 2.0], 0),
            Err(Error::BadBudget { t: 0, d: 2 })
        ));
        assert!(matches!(
            soft_topk(&[1.0, 2.0], 3),
            Err(Error::BadBudget { t: 3, d: 2 })
        ));
        assert!(soft_topk(&[1.0, f64::NAN], 1).is_err());
    }

    // Closed-form thresholds, worked by hand: with no gate saturated the
    // budget reads sum exp(z - tau) = t, i.e. tau = ln(sum exp z / t);
    // with one gate pinned at 1 the remainder must sum to t - 1.
    #[test]
    fn closed_form_uniform_row() {
        let row = soft_topk(&[0.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_close(row.tau, 2f64.ln(), 1e-10);
        for &l in &row.lambda {
            assert_close(l, 0.5, 1e-10);
        }
    }

    #[test]
    fn closed_form_one_saturated() {
        // z = [10, 0, 0, 0], t = 2: channel 0 saturates, so
        // 3 exp(-tau) = 1 and tau = ln 3.
        let row = soft_topk(&[10.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_close(row.tau, 3f64.ln(), 1e-10);
        assert_close(row.lambda[0], 1.0, 0.0);
        for &l in &row.lambda[1..] {
            assert_close(l, 1.0 / 3.0, 1e-10);
        }
        assert_eq!(row.selected, vec![0, 1]);
    }

    // The root bracket really brackets: residual changes sign across the
    // returned tau, and the residual at tau is within tolerance.
    #[test]
    fn solve_tau_sits_on_the_root() {
        let mut rng = Rng::new(41);
        for d in [3usize, 8, 64, 256] {
            for _ in 0..20 {
                let z: Vec<f64> = (0..d).map(|_| rng.range_f64(-4.0, 4.0)).collect();
                let t = rng.range(1, d - 1);
                let tau = solve_tau(&z, t).unwrap();
                assert!(budget_residual(&z, tau, t).abs() <= BUDGET_TOL);
                assert!(budget_residual(&z, tau - 1e-6, t) >= -BUDGET_TOL);
                assert!(budget_residual(&z, tau + 1e-6, t) <= BUDGET_TOL);
            }
        }
    }

    #[test]
    fn shift_invariance_of_gates() {
        let z = [0.3, -1.2, 2.0, 0.0, 0.4];
        let a = soft_topk(&z, 3).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
        let b = soft_topk(&shifted, 3).unwrap();
        assert_eq!(a.selected, b.selected);
        for (x, y) in a.lambda.iter().zip(&b.lambda) {
            assert_close(*x, *y, 1e-8);
        }
        assert_close(b.tau - a.tau, 7.5, 1e-8);
    }

    /// Rows whose selection boundary and saturation margins are wide enough
    /// that a central difference with step `eps` cannot flip the selected set
    /// or cross the min(1, .) kink.
    fn clean_random_row(rng: &mut Rng, d: usize, t: usize, margin: f64) -> Vec<f64> {
        loop {
            let z: Vec<f64> = (0..d).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let row = soft_topk(&z, t).unwrap();
            let mut sorted = row.lambda.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let boundary_ok = t == d || (sorted[t - 1] - sorted[t]) > margin;
            let kink_ok = row
                .lambda
                .iter()
                .all(|&l| l == 1.0 || (1.0 - l) > margin);
            if boundary_ok && kink_ok {
                return z;
            }
        }
    }

    // Central-difference oracle for the backward pass. F(z) = <g, mask(z)>;
    // away from ties and saturation kinks the straight-through gradient is
    // the exact derivative.
    #[test]
    fn backward_matches_central_differences() {
        let mut rng = Rng::new(99);
        let eps = 1e-5;
        for &(d, t) in &[(6usize, 2usize), (8, 5), (16, 4), (32, 20)] {
            for _ in 0..8 {
                let z = clean_random_row(&mut rng, d, t, 1e-3);
                let g: Vec<f64> = (0..d).map(|_| rng.range_f64(-1.0, 1.0)).collect();
                let analytic = soft_topk_backward(&z, t, &g).unwrap();
                for j in 0..d {
                    let mut zp = z.clone();
                    zp[j] += eps;
                    let mut zm = z.clone();
                    zm[j] -= eps;
                    let fp: f64 = soft_topk(&zp, t)
                        .unwrap()
                        .mask
                        .iter()
                        .zip(&g)
                        .map(|(m, gv)| m * gv)
                        .sum();
                    let fm: f64 = soft_topk(&zm, t)
                        .unwrap()
                        .mask
                        .iter()
                        .zip(&g)
                        .map(|(m, gv)| m * gv)
                        .sum();
                    let numeric = (fp - fm) / (2.0 * eps);
                    // the absolute term absorbs finite-difference noise from
                    // the 1e-12 bisection width on zero-gradient coordinates
                    let bound = 1e-6 + 1e-5 * analytic[j].abs().max(numeric.abs());
                    assert!(
                        (analytic[j] - numeric).abs() <= bound,
                        "d={d} t={t} j={j}: analytic {} vs numeric {}",
                        analytic[j],
                        numeric
                    );
                }
            }
        }
    }

    #[test]
    fn saturated_coordinate_has_zero_gradient() {
        let z = [10.0, 0.0, 0.0, 0.0];
        let g = [1.0, 1.0, 1.0, 1.0];
        let dz = soft_topk_backward(&z, 2, &g).unwrap();
        assert_eq!(dz[0], 0.0);
    }

    #[test]
    fn full_budget_gradient_is_zero() {
        let dz = soft_topk_backward(&[0.5, 0.1, -0.2], 3, &[1.0, 2.0, 3.0]).unwrap();
        assert!(dz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_tie_bumps_diagnostics() {
        let before = boundary_tie_count();
        soft_topk(&[2.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert!(boundary_tie_count() > before);
    }

    #[test]
    fn gradient_still_returned_at_tie() {
        let dz = soft_topk_backward(&[1.0, 1.0, 0.0, 0.0], 1, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(dz.iter().all(|v| v.is_finite()));
        assert!(dz.iter().any(|&v| v != 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn budget_and_cardinality_hold(
                z in proptest::collection::vec(-5.0f64..5.0, 1..64),
                t_frac in 0.0f64..1.0,
            ) {
                let d = z.len();
                let t = 1 + ((d - 1) as f64 * t_frac) as usize;
                let row = soft_topk(&z, t).unwrap();
                let total: f64 = row.lambda.iter().sum();
                prop_assert!((total - t as f64).abs() < 1e-8);
                prop_assert_eq!(row.selected.len(), t);
                prop_assert!(row.lambda.iter().all(|&l| (0.0..=1.0).contains(&l)));
                let picked: std::collections::HashSet<_> = row.selected.iter().collect();
                for (i, &m) in row.mask.iter().enumerate() {
                    if picked.contains(&i) {
                        prop_assert_eq!(m, row.lambda[i]);
                    } else {
                        prop_assert_eq!(m, 0.0);
                    }
                }
            }

            #[test]
            fn gates_are_monotone_in_scores(
                z in proptest::collection::vec(-5.0f64..5.0, 2..32),
                t_frac in 0.0f64..1.0,
            ) {
                let d = z.len();
                let t = 1 + ((d - 1) as f64 * t_frac) as usize;
                let row = soft_topk(&z, t).unwrap();
                for i in 0..d {
                    for j in 0..d {
                        if z[i] > z[j] {
                            prop_assert!(row.lambda[i] >= row.lambda[j] - 1e-12);
                        }
                    }
                }
            }
        }
    }
}
