//! External clustering validity indices: ACC, NMI and ARI.
//!
//! All three are computed from a shared [`ContingencyTable`]. Labels are
//! arbitrary `usize` ids; only the induced partitions matter.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("label length mismatch: predicted {predicted}, truth {truth}")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("{metric} needs at least {min} samples, got {n}")]
    TooFewSamples { metric: &'static str, min: usize, n: usize },
}

/// Co-occurrence counts between predicted clusters (rows) and true classes (columns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self, MetricError> {
        check_lengths(pred, truth)?;
        let pred_ids = dense_ids(pred);
        let truth_ids = dense_ids(truth);
        let rows = pred_ids.values().max().map_or(0, |m| m + 1);
        let cols = truth_ids.values().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (p, t) in pred.iter().zip(truth) {
            counts[pred_ids[p]][truth_ids[t]] += 1;
        }
        Ok(Self {
            counts,
            n: pred.len() as u64,
        })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            predicted: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

/// Maps each distinct label to a dense index in ascending label order.
fn dense_ids(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    ids
}

/// Clustering accuracy under the best one-to-one matching of clusters to classes.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.n == 0 {
        return Err(MetricError::TooFewSamples {
            metric: "ACC",
            min: 1,
            n: 0,
        });
    }
    let size = table.counts.len().max(table.row_sums().len()).max(table.col_sums().len());
    // Square profit matrix padded with zeros; maximize matched counts.
    let max_count = table.n as i64;
    let mut cost = vec![vec![max_count; size]; size];
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i][j] = max_count - c as i64;
        }
    }
    let assignment = hungarian(&cost);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| table.counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0))
        .sum();
    Ok(matched as f64 / table.n as f64)
}

/// Minimum-cost perfect matching on a square integer cost matrix.
///
/// Returns `assignment[row] = col`. This is the O(n³) shortest augmenting path
/// form of the Hungarian method with row and column potentials.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is a virtual column.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the arithmetic-mean normalizer and natural logs.
///
/// Two identical single-cluster partitions score 1; otherwise a zero-entropy
/// side scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.n == 0 {
        return Ok(1.0);
    }
    let n = table.n as f64;
    let a = table.row_sums();
    let b = table.col_sums();
    let h_pred = entropy(&a, n);
    let h_truth = entropy(&b, n);
    if a.len() == 1 && b.len() == 1 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_truth == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += (c / n) * (c * n / (a[i] as f64 * b[j] as f64)).ln();
        }
    }
    let value = mi / ((h_pred + h_truth) / 2.0);
    Ok(value.clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
///
/// Returns 1 when both the numerator and denominator vanish, which happens
/// only for identical trivial partitions.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.n < 2 {
        return Err(MetricError::TooFewSamples {
            metric: "ARI",
            min: 2,
            n: table.n as usize,
        });
    }
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let expected = sum_a * sum_b / comb2(table.n);
    let max_index = (sum_a + sum_b) / 2.0;
    let numerator = index - expected;
    let denominator = max_index - expected;
    if denominator == 0.0 {
        return Ok(if numerator == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(numerator / denominator)
}

/// ACC, NMI and ARI for one labelling.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn score_all(pred: &[usize], truth: &[usize]) -> Result<Scores, MetricError> {
    Ok(Scores {
        acc: clustering_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let t = [0, 0, 1, 1];
        assert_eq!(clustering_accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[1, 1, 0, 0], &t).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 1, 0, 1], &t).unwrap(), 0.5);
        assert!(matches!(
            clustering_accuracy(&[0, 1], &t),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn accuracy_handles_unequal_cluster_counts() {
        // Three predicted clusters against two classes: best matching uses two of them.
        let pred = [0, 0, 1, 2, 2, 2];
        let truth = [0, 0, 0, 1, 1, 1];
        assert!((clustering_accuracy(&pred, &truth).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        // Constant prediction scores the majority class frequency.
        assert!((clustering_accuracy(&[4; 5], &[0, 0, 0, 1, 2]).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn nmi_examples() {
        let t = [0, 0, 1, 1];
        assert!((nmi(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[3, 3, 3, 3], &t).unwrap(), 0.0);
        assert_eq!(nmi(&[1, 1, 1], &[2, 2, 2]).unwrap(), 1.0);
    }

    #[test]
    fn ari_examples() {
        let t = [0, 0, 1, 1];
        assert!((ari(&[5, 5, 7, 7], &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ari(&[0, 0, 0, 0], &t).unwrap(), 0.0);
        assert!(matches!(ari(&[0], &[0]), Err(MetricError::TooFewSamples { .. })));
    }

    #[test]
    fn hungarian_small_cases() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = hungarian(&cost);
        let total: i64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5);
        assert_eq!(hungarian(&[]), Vec::<usize>::new());
    }
}
