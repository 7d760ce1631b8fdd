use std::collections::HashMap;

use proptest::prelude::*;
use tagcc::metrics::{ari, clustering_accuracy, nmi};

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Best accuracy over every one-to-one relabelling of the predicted clusters.
fn brute_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let p = distinct(pred);
    let mut t = distinct(truth);
    let width = p.len().max(t.len());
    let mut fresh = 1_000_000;
    while t.len() < width {
        t.push(fresh);
        fresh += 1;
    }
    let mut best = 0;
    for perm in permutations(&t) {
        let map: HashMap<usize, usize> = p.iter().copied().zip(perm).collect();
        let hits = pred.iter().zip(truth).filter(|(a, b)| map[a] == **b).count();
        best = best.max(hits);
    }
    best as f64 / pred.len() as f64
}

/// Adjusted Rand index from explicit pair counts.
fn brute_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let (mut both, mut only_pred, mut only_truth, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_pred += 1.0,
                (false, true) => only_truth += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let num = 2.0 * (both * neither - only_pred * only_truth);
    let den = (both + only_pred) * (only_pred + neither) + (both + only_truth) * (only_truth + neither);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn brute_entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1.0;
    }
    -counts.values().map(|c| (c / n) * (c / n).ln()).sum::<f64>()
}

/// Mutual information summed over label pairs, arithmetic-mean normalizer.
fn brute_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let (kp, kt) = (distinct(pred).len(), distinct(truth).len());
    if kp == 1 && kt == 1 {
        return 1.0;
    }
    let (hp, ht) = (brute_entropy(pred), brute_entropy(truth));
    if hp == 0.0 || ht == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for &u in &distinct(pred) {
        for &v in &distinct(truth) {
            let joint = pred.iter().zip(truth).filter(|(a, b)| **a == u && **b == v).count() as f64 / n;
            if joint == 0.0 {
                continue;
            }
            let pu = pred.iter().filter(|&&a| a == u).count() as f64 / n;
            let pv = truth.iter().filter(|&&b| b == v).count() as f64 / n;
            mi += joint * (joint / (pu * pv)).ln();
        }
    }
    mi / ((hp + ht) / 2.0)
}

fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    (2usize..=50, 1usize..=5, 1usize..=5).prop_flat_map(|(n, kp, kt)| {
        (
            prop::collection::vec(0..kp, n),
            prop::collection::vec(0..kt, n),
            Just((0..kp).map(|i| 7 * i + 3).collect::<Vec<_>>()).prop_shuffle(),
            Just((0..kt).map(|i| 11 * i + 1).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn indices_match_brute_force_and_ignore_label_names((pred, truth, rp, rt) in instance()) {
        let acc = clustering_accuracy(&pred, &truth).unwrap();
        let n_mi = nmi(&pred, &truth).unwrap();
        let a_ri = ari(&pred, &truth).unwrap();
        prop_assert!((acc - brute_accuracy(&pred, &truth)).abs() < 1e-9);
        prop_assert!((n_mi - brute_nmi(&pred, &truth)).abs() < 1e-9);
        prop_assert!((a_ri - brute_ari(&pred, &truth)).abs() < 1e-9);

        let pred2: Vec<usize> = pred.iter().map(|&l| rp[l]).collect();
        let truth2: Vec<usize> = truth.iter().map(|&l| rt[l]).collect();
        prop_assert!((clustering_accuracy(&pred2, &truth2).unwrap() - acc).abs() < 1e-9);
        prop_assert!((nmi(&pred2, &truth2).unwrap() - n_mi).abs() < 1e-9);
        prop_assert!((ari(&pred2, &truth2).unwrap() - a_ri).abs() < 1e-9);
    }
}

#[test]
fn oracle_sanity() {
    assert_eq!(brute_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]), 0.5);
    assert!((brute_ari(&[0, 0, 1, 1], &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
    assert!((brute_nmi(&[0, 0, 1, 1], &[5, 5, 9, 9]) - 1.0).abs() < 1e-12);
}
