//! Classification accuracy and partition-agreement scores.

use std::collections::HashMap;

fn relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Cluster-by-class count table.
pub fn contingency(truth: &[usize], pred: &[usize]) -> Vec<Vec<u64>> {
    assert_eq!(truth.len(), pred.len(), "partitions differ in length");
    let (t, nt) = relabel(truth);
    let (p, np) = relabel(pred);
    let mut table = vec![vec![0u64; np]; nt];
    for (&a, &b) in t.iter().zip(&p) {
        table[a][b] += 1;
    }
    table
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalised by the arithmetic mean of the two entropies;
/// `0/0` is 0.
pub fn nmi(truth: &[usize], pred: &[usize]) -> f64 {
    let table = contingency(truth, pred);
    let n = truth.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..table.first().map_or(0, Vec::len))
        .map(|c| table.iter().map(|r| r[c]).sum())
        .collect();
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    let h = 0.5 * (entropy(rows.into_iter(), n) + entropy(cols.into_iter(), n));
    if h <= 0.0 {
        0.0
    } else {
        (mi / h).clamp(0.0, 1.0)
    }
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from contingency pair counts. Degenerate cases where
/// the expected and maximal index coincide (both partitions trivial) score 1.
pub fn ari(truth: &[usize], pred: &[usize]) -> f64 {
    let table = contingency(truth, pred);
    let n = truth.len() as u64;
    let index: f64 = table.iter().flatten().map(|&x| choose2(x)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let ncols = table.first().map_or(0, Vec::len);
    let sum_b: f64 = (0..ncols).map(|c| choose2(table.iter().map(|r| r[c]).sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
