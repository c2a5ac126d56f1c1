//! Overlap analysis between prompt-selected sub-networks.
//!
//! Two prompts each pick t of d channels per layer; their overlap rate at a
//! layer is |S_A intersect S_B| / t. Aggregating over groups of prompts from
//! labeled domains gives a matrix of within- and cross-domain overlap, plus
//! two significance tests:
//!
//! * a label permutation test for "same-domain prompts overlap more than
//!   cross-domain prompts" at a given layer, and
//! * a sign-flip test for "early layers overlap more than late layers"
//!   over matched prompt pairs.
//!
//! Both report p = (1 + #{T_perm >= T_obs}) / (1 + n_perm).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::predictor::MaskSet;
use crate::rng::{derive, Rng, PERM};
use crate::{Error, Result};

/// Fraction of shared channels between two equal-size ascending index sets.
pub fn overlap_rate(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut shared = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    shared as f64 / a.len() as f64
}

/// Overlap rate between two mask sets at one layer.
pub fn layer_overlap(a: &MaskSet, b: &MaskSet, layer: usize) -> f64 {
    overlap_rate(&a.selected[layer], &b.selected[layer])
}

// ── domain matrices ────────────────────────────────────────────────────

/// Mask sets for a group of prompts sharing a domain label.
pub struct DomainMasks {
    pub label: String,
    pub masks: Vec<MaskSet>,
}

/// Symmetric matrix of mean overlap rates. `cells[i][j]` averages over all
/// prompt pairs between domains i and j; the diagonal averages over
/// distinct-prompt pairs within the domain and is `None` when the domain
/// has fewer than two prompts.
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

fn validate_domains(domains: &[DomainMasks]) -> Result<(usize, usize)> {
    let first = domains
        .iter()
        .flat_map(|d| d.masks.first())
        .next()
        .ok_or_else(|| Error::Invalid("no prompts to compare".to_string()))?;
    let n_layers = first.selected.len();
    let t = first.t;
    for d in domains {
        for m in &d.masks {
            if m.selected.len() != n_layers {
                return Err(Error::LayerCountMismatch {
                    mask_layers: m.selected.len(),
                    model_layers: n_layers,
                });
            }
            if m.t != t {
                return Err(Error::BudgetMismatch {
                    mask_t: m.t,
                    expected: t,
                });
            }
        }
    }
    Ok((n_layers, t))
}

fn pair_mean<F: FnMut(&MaskSet, &MaskSet) -> f64>(
    a: &[MaskSet],
    b: &[MaskSet],
    same: bool,
    mut f: F,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    if same {
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                sum += f(&a[i], &a[j]);
                n += 1;
            }
        }
    } else {
        for x in a {
            for y in b {
                sum += f(x, y);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-layer overlap matrix across domains.
pub fn overlap_matrix(domains: &[DomainMasks], layer: usize) -> Result<OverlapMatrix> {
    let (n_layers, _) = validate_domains(domains)?;
    if layer >= n_layers {
        return Err(Error::IndexOutOfRange {
            op: "overlap_matrix",
            index: layer,
            size: n_layers,
        });
    }
    build_matrix(domains, |a, b| layer_overlap(a, b, layer))
}

/// Overlap matrix averaged over all layers.
pub fn mean_overlap_matrix(domains: &[DomainMasks]) -> Result<OverlapMatrix> {
    let (n_layers, _) = validate_domains(domains)?;
    build_matrix(domains, |a, b| {
        (0..n_layers).map(|l| layer_overlap(a, b, l)).sum::<f64>() / n_layers as f64
    })
}

fn build_matrix<F: FnMut(&MaskSet, &MaskSet) -> f64>(
    domains: &[DomainMasks],
    mut f: F,
) -> Result<OverlapMatrix> {
    let n = domains.len();
    let mut cells = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let cell = pair_mean(&domains[i].masks, &domains[j].masks, i == j, &mut f);
            cells[i][j] = cell;
            cells[j][i] = cell;
        }
    }
    Ok(OverlapMatrix {
        labels: domains.iter().map(|d| d.label.clone()).collect(),
        cells,
    })
}

// ── csv output ─────────────────────────────────────────────────────────

/// Write one matrix as CSV: header `domain,<labels...>`, six decimals,
/// empty cell for missing values.
pub fn write_matrix_csv(path: &Path, m: &OverlapMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "domain,{}", m.labels.join(","))?;
    for (label, row) in m.labels.iter().zip(&m.cells) {
        let vals: Vec<String> = row
            .iter()
            .map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default())
            .collect();
        writeln!(f, "{label},{}", vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Write `overlap_layer_<l>.csv` for every layer plus `overlap_mean.csv`.
/// Returns the paths written.
pub fn write_overlap_reports(dir: &Path, domains: &[DomainMasks]) -> Result<Vec<PathBuf>> {
    let (n_layers, _) = validate_domains(domains)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for l in 0..n_layers {
        let m = overlap_matrix(domains, l)?;
        let p = dir.join(format!("overlap_layer_{l}.csv"));
        write_matrix_csv(&p, &m)?;
        paths.push(p);
    }
    let mean = mean_overlap_matrix(domains)?;
    let p = dir.join("overlap_mean.csv");
    write_matrix_csv(&p, &mean)?;
    paths.push(p);
    Ok(paths)
}

// ── significance tests ─────────────────────────────────────────────────

#[derive(Debug)]
pub struct PermTestReport {
    /// Observed statistic (a difference of means; positive favors the claim).
    pub observed: f64,
    pub p_value: f64,
    pub n_perm: usize,
}

fn stat_within_minus_cross(labels: &[usize], pair_ov: &[Vec<f64>]) -> f64 {
    let n = labels.len();
    let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                ws += pair_ov[i][j];
                wn += 1;
            } else {
                cs += pair_ov[i][j];
                cn += 1;
            }
        }
    }
    ws / wn.max(1) as f64 - cs / cn.max(1) as f64
}

/// Permutation test of "within-domain overlap exceeds cross-domain overlap"
/// at one layer. Domain labels are shuffled across prompts; the statistic is
/// mean within-pair overlap minus mean cross-pair overlap.
pub fn within_vs_cross_test(
    domains: &[DomainMasks],
    layer: usize,
    n_perm: usize,
    seed: u64,
) -> Result<PermTestReport> {
    let (n_layers, _) = validate_domains(domains)?;
    if layer >= n_layers {
        return Err(Error::IndexOutOfRange {
            op: "within_vs_cross_test",
            index: layer,
            size: n_layers,
        });
    }
    let mut labels = Vec::new();
    let mut flat: Vec<&MaskSet> = Vec::new();
    for (di, d) in domains.iter().enumerate() {
        for m in &d.masks {
            labels.push(di);
            flat.push(m);
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Invalid("need at least two domains".to_string()));
    }
    let n = flat.len();
    let mut pair_ov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            pair_ov[i][j] = layer_overlap(flat[i], flat[j], layer);
        }
    }
    let observed = stat_within_minus_cross(&labels, &pair_ov);
    let mut rng = Rng::new(derive(seed, PERM));
    let mut perm = labels.clone();
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        rng.shuffle(&mut perm);
        if stat_within_minus_cross(&perm, &pair_ov) >= observed {
            at_least += 1;
        }
    }
    Ok(PermTestReport {
        observed,
        p_value: (1 + at_least) as f64 / (1 + n_perm) as f64,
        n_perm,
    })
}

/// Sign-flip test of "first-layer overlap exceeds last-layer overlap".
/// Every prompt pair contributes one paired difference; flipping the sign of
/// each difference at random gives the null distribution of the mean.
pub fn first_vs_last_layer_test(
    domains: &[DomainMasks],
    n_perm: usize,
    seed: u64,
) -> Result<PermTestReport> {
    let (n_layers, _) = validate_domains(domains)?;
    if n_layers < 2 {
        return Err(Error::Invalid("need at least two layers".to_string()));
    }
    let flat: Vec<&MaskSet> = domains.iter().flat_map(|d| d.masks.iter()).collect();
    let mut diffs = Vec::new();
    for i in 0..flat.len() {
        for j in (i + 1)..flat.len() {
            diffs.push(
                layer_overlap(flat[i], flat[j], 0) - layer_overlap(flat[i], flat[j], n_layers - 1),
            );
        }
    }
    if diffs.is_empty() {
        return Err(Error::Invalid("need at least two prompts".to_string()));
    }
    let observed = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut rng = Rng::new(derive(seed, PERM));
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        let mut s = 0.0;
        for &d in &diffs {
            s += if rng.next_u64() & 1 == 0 { d } else { -d };
        }
        if s / diffs.len() as f64 >= observed {
            at_least += 1;
        }
    }
    Ok(PermTestReport {
        observed,
        p_value: (1 + at_least) as f64 / (1 + n_perm) as f64,
        n_perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_set(layers: Vec<Vec<usize>>, d: usize) -> MaskSet {
        let t = layers[0].len();
        let rows: Vec<Vec<f64>> = layers
            .iter()
            .map(|sel| {
                let mut r = vec![0.0; d];
                for &j in sel {
                    r[j] = 1.0;
                }
                r
            })
            .collect();
        MaskSet {
            t,
            lambda: rows.clone(),
            selected: layers,
            rows,
        }
    }

    #[test]
    fn overlap_rate_known_values() {
        assert_eq!(overlap_rate(&[1, 2, 3], &[2, 3, 4]), 2.0 / 3.0);
        assert_eq!(overlap_rate(&[0, 5, 9], &[0, 5, 9]), 1.0);
        assert_eq!(overlap_rate(&[0, 1], &[2, 3]), 0.0);
        assert_eq!(overlap_rate(&[], &[]), 0.0);
    }

    #[test]
    fn matrix_is_symmetric_with_exact_cells() {
        // domain A: two prompts sharing 2 of 3 channels; domain B: one prompt
        let a1 = mask_set(vec![vec![0, 1, 2]], 8);
        let a2 = mask_set(vec![vec![0, 1, 3]], 8);
        let b1 = mask_set(vec![vec![5, 6, 7]], 8);
        let domains = vec![
            DomainMasks { label: "a".into(), masks: vec![a1, a2] },
            DomainMasks { label: "b".into(), masks: vec![b1] },
        ];
        let m = overlap_matrix(&domains, 0).unwrap();
        assert_eq!(m.cells[0][0], Some(2.0 / 3.0));
        assert_eq!(m.cells[1][1], None); // single prompt: no within pairs
        assert_eq!(m.cells[0][1], Some(0.0));
        assert_eq!(m.cells[0][1], m.cells[1][0]);
    }

    #[test]
    fn mean_matrix_averages_layers() {
        // layer 0 overlap 1, layer 1 overlap 0 -> mean 0.5
        let p1 = mask_set(vec![vec![0, 1], vec![0, 1]], 6);
        let p2 = mask_set(vec![vec![0, 1], vec![4, 5]], 6);
        let domains = vec![DomainMasks { label: "only".into(), masks: vec![p1, p2] }];
        let m = mean_overlap_matrix(&domains).unwrap();
        assert_eq!(m.cells[0][0], Some(0.5));
    }

    #[test]
    fn csv_files_have_expected_layout() {
        let p1 = mask_set(vec![vec![0, 1], vec![2, 3]], 6);
        let p2 = mask_set(vec![vec![0, 2], vec![2, 3]], 6);
        let q1 = mask_set(vec![vec![4, 5], vec![0, 1]], 6);
        let domains = vec![
            DomainMasks { label: "x".into(), masks: vec![p1, p2] },
            DomainMasks { label: "y".into(), masks: vec![q1] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let paths = write_overlap_reports(dir.path(), &domains).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["overlap_layer_0.csv", "overlap_layer_1.csv", "overlap_mean.csv"]);

        let text = std::fs::read_to_string(&paths[0]).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "domain,x,y");
        assert_eq!(lines[1], "x,0.500000,0.000000");
        assert_eq!(lines[2], "y,0.000000,"); // empty diagonal for 1-prompt domain
    }

    #[test]
    fn structured_domains_give_small_p_value() {
        // within-domain prompts share most channels, cross-domain few
        let mut domains = Vec::new();
        for (label, base) in [("a", 0usize), ("b", 8), ("c", 16)] {
            let masks: Vec<MaskSet> = (0..6)
                .map(|k| {
                    // 4 of 24 channels: three fixed to the domain, one roams
                    mask_set(vec![vec![base, base + 1, base + 2, (base + 3 + k) % 24].into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect()], 24)
                })
                .collect();
            domains.push(DomainMasks { label: label.into(), masks });
        }
        // equalize budget: dedup above can shrink a set, so rebuild any short one
        for d in &mut domains {
            d.masks.retain(|m| m.selected[0].len() == 4);
            assert!(d.masks.len() >= 4);
        }
        let r = within_vs_cross_test(&domains, 0, 500, 7).unwrap();
        assert!(r.observed > 0.4, "observed {}", r.observed);
        assert!(r.p_value < 0.05, "p {}", r.p_value);
    }

    #[test]
    fn unstructured_labels_give_large_p_value() {
        // identical masks everywhere: statistic is 0 under every labeling
        let m = || mask_set(vec![vec![0, 1, 2]], 10);
        let domains = vec![
            DomainMasks { label: "a".into(), masks: vec![m(), m(), m()] },
            DomainMasks { label: "b".into(), masks: vec![m(), m(), m()] },
        ];
        let r = within_vs_cross_test(&domains, 0, 200, 11).unwrap();
        assert_eq!(r.observed, 0.0);
        assert!(r.p_value > 0.9, "p {}", r.p_value);
    }

    #[test]
    fn sign_flip_detects_layer_gradient() {
        // first layer: everyone shares channels; last layer: disjoint
        let masks: Vec<MaskSet> = (0..8)
            .map(|k| mask_set(vec![vec![0, 1, 2], vec![3 * k, 3 * k + 1, 3 * k + 2]], 24))
            .collect();
        let domains = vec![DomainMasks { label: "d".into(), masks }];
        let r = first_vs_last_layer_test(&domains, 500, 3).unwrap();
        assert!(r.observed > 0.9);
        assert!(r.p_value < 0.05, "p {}", r.p_value);

        // reversed direction: p should be large
        let masks_rev: Vec<MaskSet> = (0..8)
            .map(|k| mask_set(vec![vec![3 * k, 3 * k + 1, 3 * k + 2], vec![0, 1, 2]], 24))
            .collect();
        let domains_rev = vec![DomainMasks { label: "d".into(), masks: masks_rev }];
        let r = first_vs_last_layer_test(&domains_rev, 500, 3).unwrap();
        assert!(r.p_value > 0.95, "p {}", r.p_value);
    }

    #[test]
    fn untrained_predictor_shows_no_depth_gradient() {
        // a random, untrained predictor has no reason to overlap more in the
        // first layer than the last, so the paired sign-flip test must not
        // reject its null
        use crate::params::{init_predictor, ModelConfig, ParamStore};
        use crate::predictor::predict_mask_set;
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            t_ffn: 4,
            vocab: 64,
            max_seq: 16,
            p_layers: 1,
            p_d_model: 8,
            p_heads: 2,
            p_ffn: 8,
            head_hidden: 8,
        };
        let mut rng = crate::rng::Rng::new(31);
        let mut store = ParamStore::new();
        init_predictor(&mut store, &cfg, &mut rng);
        for v in &mut store.get_mut("head.w2").data {
            *v = rng.normal_scaled(0.5);
        }
        let mut prompts = Vec::new();
        for i in 0..10usize {
            prompts.push(vec![(i * 7 + 3) % 60, (i * 13 + 5) % 60, (i * 29 + 11) % 60]);
        }
        let masks: Vec<MaskSet> = prompts
            .iter()
            .map(|p| predict_mask_set(&store, &cfg, p).unwrap())
            .collect();
        let domains = vec![DomainMasks { label: "any".into(), masks }];
        let r = first_vs_last_layer_test(&domains, 500, 17).unwrap();
        assert!(r.p_value >= 0.05, "untrained depth test rejected: p {}", r.p_value);
    }

    #[test]
    fn random_masks_overlap_near_chance_rate() {
        // expected overlap of two random t-of-d sets is t/d
        let (t, d) = (16usize, 64usize);
        let mut rng = crate::rng::Rng::new(99);
        let mut total = 0.0;
        let n_pairs = 400;
        for _ in 0..n_pairs {
            let a = rng.choose_indices(d, t);
            let b = rng.choose_indices(d, t);
            total += overlap_rate(&a, &b);
        }
        let mean = total / n_pairs as f64;
        // E = t/d = 0.25, sd of the mean ~ 0.005; allow 4 sigma
        assert!((mean - 0.25).abs() < 0.02, "mean {}", mean);
    }
}
