//! Clustering evaluation: unsupervised accuracy under the best one-to-one
//! cluster-to-class matching, and normalized mutual information.
//!
//! The matching is an exact Hungarian assignment, not a greedy one. Entropy
//! and mutual-information sums run over value-sorted term lists, so both
//! metrics are exactly invariant under relabeling permutations of either
//! side.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Joint label counts with cached marginals. Rows index true classes,
/// columns predicted clusters, in sorted order of the distinct label values.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    counts: Array2<u64>,
    row_marginals: Vec<u64>,
    col_marginals: Vec<u64>,
    true_values: Vec<i64>,
    pred_values: Vec<i64>,
    total: u64,
}

fn dense_index(labels: &[i64]) -> (Vec<i64>, Vec<usize>) {
    let mut values: Vec<i64> = labels.to_vec();
    values.sort_unstable();
    values.dedup();
    let idx = labels
        .iter()
        .map(|l| values.binary_search(l).unwrap())
        .collect();
    (values, idx)
}

impl ContingencyTable {
    pub fn from_labels(y_true: &[i64], y_pred: &[i64]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::LengthMismatch {
                left: y_true.len(),
                right: y_pred.len(),
            });
        }
        if y_true.is_empty() {
            return Err(Error::EmptyInput("labels"));
        }
        let (true_values, ti) = dense_index(y_true);
        let (pred_values, pi) = dense_index(y_pred);
        let mut counts = Array2::<u64>::zeros((true_values.len(), pred_values.len()));
        for (&a, &b) in ti.iter().zip(pi.iter()) {
            counts[[a, b]] += 1;
        }
        let row_marginals = counts
            .rows()
            .into_iter()
            .map(|r| r.sum())
            .collect::<Vec<_>>();
        let col_marginals = counts
            .columns()
            .into_iter()
            .map(|c| c.sum())
            .collect::<Vec<_>>();
        Ok(Self {
            counts,
            row_marginals,
            col_marginals,
            true_values,
            pred_values,
            total: y_true.len() as u64,
        })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Exact maximum-profit assignment on a square matrix.
///
/// Returns `perm` with `perm[row] = column`. Implemented as the O(n^3)
/// potential/augmenting-path form of the Hungarian algorithm on the negated
/// profits.
pub fn hungarian_max(profit: &Array2<f64>) -> Vec<usize> {
    let n = profit.nrows();
    assert_eq!(n, profit.ncols(), "hungarian_max needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    // cost = max - profit keeps the minimization non-negative
    let max = profit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| max - profit[[i, j]];

    // 1-based arrays; p[j] is the row matched to column j, 0 meaning none.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Unsupervised classification accuracy: the fraction of samples whose true
/// label equals the image of their predicted cluster under the best
/// one-to-one matching.
pub fn acc(y_true: &[i64], y_pred: &[i64]) -> Result<f64> {
    let table = ContingencyTable::from_labels(y_true, y_pred)?;
    let kt = table.true_values.len();
    let kp = table.pred_values.len();
    let k = kt.max(kp);
    // profit[pred][true], padded square with zero-profit slots
    let mut profit = Array2::<f64>::zeros((k, k));
    for t in 0..kt {
        for p in 0..kp {
            profit[[p, t]] = table.counts[[t, p]] as f64;
        }
    }
    let mapping = hungarian_max(&profit);
    let mut matched = 0u64;
    for p in 0..kp {
        let t = mapping[p];
        if t < kt {
            matched += table.counts[[t, p]];
        }
    }
    Ok(matched as f64 / table.total as f64)
}

/// Sum in ascending value order so the result does not depend on label
/// numbering.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn entropy_from_marginals(marginals: &[u64], total: f64) -> f64 {
    let terms = marginals
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .collect();
    sorted_sum(terms)
}

/// Normalized mutual information `2 I(y, y_hat) / (H(y) + H(y_hat))` with
/// natural logarithms and the `0 log 0 = 0` convention.
///
/// If both partitions are single clusters the ratio is 0/0; that case is
/// defined as 1 (the partitions are then necessarily identical).
pub fn nmi(y_true: &[i64], y_pred: &[i64]) -> Result<f64> {
    let table = ContingencyTable::from_labels(y_true, y_pred)?;
    let total = table.total as f64;
    let h_true = entropy_from_marginals(&table.row_marginals, total);
    let h_pred = entropy_from_marginals(&table.col_marginals, total);
    if h_true + h_pred == 0.0 {
        return Ok(1.0);
    }
    let mut terms = Vec::new();
    for t in 0..table.row_marginals.len() {
        for p in 0..table.col_marginals.len() {
            let n_ij = table.counts[[t, p]];
            if n_ij == 0 {
                continue;
            }
            let joint = n_ij as f64 / total;
            let ratio = (n_ij as f64 * total)
                / (table.row_marginals[t] as f64 * table.col_marginals[p] as f64);
            terms.push(joint * ratio.ln());
        }
    }
    let mi = sorted_sum(terms).max(0.0);
    Ok(2.0 * mi / (h_true + h_pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for slot in 0..n {
                let mut q: Vec<usize> = p.iter().map(|&v| if v >= slot { v + 1 } else { v }).collect();
                q.insert(0, slot);
                out.push(q);
            }
        }
        out
    }

    /// Brute force over every one-to-one mapping of clusters onto classes.
    fn acc_brute(y_true: &[i64], y_pred: &[i64]) -> f64 {
        let (tv, ti) = super::dense_index(y_true);
        let (pv, pi) = super::dense_index(y_pred);
        let k = tv.len().max(pv.len());
        let mut best = 0usize;
        for perm in permutations(k) {
            let matched = ti
                .iter()
                .zip(pi.iter())
                .filter(|&(&t, &p)| perm[p] == t)
                .count();
            best = best.max(matched);
        }
        best as f64 / y_true.len() as f64
    }

    /// Direct probability-table evaluation of the normalized mutual
    /// information.
    fn nmi_brute(y_true: &[i64], y_pred: &[i64]) -> f64 {
        let n = y_true.len() as f64;
        let mut joint_counts: HashMap<(i64, i64), u64> = HashMap::new();
        let mut tc: HashMap<i64, u64> = HashMap::new();
        let mut pc: HashMap<i64, u64> = HashMap::new();
        for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
            *joint_counts.entry((t, p)).or_default() += 1;
            *tc.entry(t).or_default() += 1;
            *pc.entry(p).or_default() += 1;
        }
        let joint: HashMap<(i64, i64), f64> =
            joint_counts.iter().map(|(&k, &c)| (k, c as f64 / n)).collect();
        let pt: HashMap<i64, f64> = tc.iter().map(|(&k, &c)| (k, c as f64 / n)).collect();
        let pp: HashMap<i64, f64> = pc.iter().map(|(&k, &c)| (k, c as f64 / n)).collect();
        let h = |m: &HashMap<i64, f64>| -> f64 { m.values().map(|&p| -p * p.ln()).sum() };
        let (ht, hp) = (h(&pt), h(&pp));
        if ht + hp == 0.0 {
            return 1.0;
        }
        let mut mi = 0.0;
        for (&(t, p), &pj) in &joint {
            mi += pj * (pj / (pt[&t] * pp[&p])).ln();
        }
        2.0 * mi.max(0.0) / (ht + hp)
    }

    fn random_labels(n: usize, k: i64, rng: &mut ChaCha8Rng) -> Vec<i64> {
        (0..n).map(|_| rng.gen_range(0..k)).collect()
    }

    #[test]
    fn hungarian_prefers_the_cross_assignment() {
        let profit = array![[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(hungarian_max(&profit), vec![1, 0]);
    }

    #[test]
    fn hungarian_keeps_a_dominant_diagonal() {
        let profit = array![[9.0, 1.0, 0.0], [2.0, 8.0, 1.0], [0.0, 1.0, 7.0]];
        assert_eq!(hungarian_max(&profit), vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_matches_factorial_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..200 {
            let k = rng.gen_range(1..=5);
            let mut profit = Array2::zeros((k, k));
            profit.mapv_inplace(|_| rng.gen_range(0..20) as f64);
            let perm = hungarian_max(&profit);
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| profit[[i, j]]).sum();
            let best = permutations(k)
                .into_iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| profit[[i, j]]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(total, best, "trial {trial}: {profit:?}");
            // and it is a permutation
            let mut seen = vec![false; k];
            for &j in &perm {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn acc_is_one_under_label_permutation() {
        assert_eq!(acc(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn acc_half_for_uninformative_prediction() {
        assert_eq!(acc(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn acc_of_constant_prediction_is_the_majority_share() {
        let y = [0, 0, 0, 1, 1, 2];
        let yhat = [7, 7, 7, 7, 7, 7];
        assert_abs_diff_eq!(acc(&y, &yhat).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn acc_matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let k = rng.gen_range(1..=5);
            let n = rng.gen_range(1..=40);
            let y = random_labels(n, k, &mut rng);
            let p = random_labels(n, rng.gen_range(1..=5), &mut rng);
            assert_abs_diff_eq!(acc(&y, &p).unwrap(), acc_brute(&y, &p), epsilon = 1e-12);
        }
    }

    #[test]
    fn nmi_is_one_for_identical_partitions() {
        let y = [0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(nmi(&y, &y).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nmi_is_zero_for_independent_partitions() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_matches_probability_table_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y = random_labels(200, rng.gen_range(1..=6), &mut rng);
            let p = random_labels(200, rng.gen_range(1..=6), &mut rng);
            assert_abs_diff_eq!(nmi(&y, &p).unwrap(), nmi_brute(&y, &p), epsilon = 1e-12);
        }
    }

    #[test]
    fn metrics_are_exactly_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // value-remapping permutations of the label alphabet
        let remap = |labels: &[i64], table: &[i64]| -> Vec<i64> {
            labels.iter().map(|&l| table[l as usize]).collect()
        };
        for _ in 0..50 {
            let y = random_labels(120, 4, &mut rng);
            let p = random_labels(120, 4, &mut rng);
            let base_acc = acc(&y, &p).unwrap();
            let base_nmi = nmi(&y, &p).unwrap();
            for table in [[2i64, 0, 3, 1], [3, 2, 1, 0], [1, 3, 0, 2]] {
                let pp = remap(&p, &table);
                assert_eq!(acc(&y, &pp).unwrap().to_bits(), base_acc.to_bits());
                assert_eq!(nmi(&y, &pp).unwrap().to_bits(), base_nmi.to_bits());
                let yy = remap(&y, &table);
                assert_eq!(acc(&yy, &p).unwrap().to_bits(), base_acc.to_bits());
                assert_eq!(nmi(&yy, &p).unwrap().to_bits(), base_nmi.to_bits());
            }
        }
    }

    #[test]
    fn nmi_and_acc_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let y = random_labels(50, rng.gen_range(1..=4), &mut rng);
            let p = random_labels(50, rng.gen_range(1..=4), &mut rng);
            let a = acc(&y, &p).unwrap();
            let m = nmi(&y, &p).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert!(m >= 0.0 && m <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn degenerate_single_cluster_convention() {
        assert_eq!(nmi(&[3, 3, 3], &[5, 5, 5]).unwrap(), 1.0);
    }

    #[test]
    fn error_contracts() {
        assert!(matches!(
            acc(&[0, 1], &[0]).unwrap_err(),
            crate::Error::LengthMismatch { .. }
        ));
        assert!(matches!(acc(&[], &[]).unwrap_err(), crate::Error::EmptyInput(_)));
        assert!(matches!(
            nmi(&[0], &[0, 1]).unwrap_err(),
            crate::Error::LengthMismatch { .. }
        ));
    }

    #[test]
    fn contingency_totals_are_consistent() {
        let table = ContingencyTable::from_labels(&[0, 0, 1, 2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(table.total(), 4);
        assert_eq!(table.counts().sum(), 4);
    }
}
