//! k-means on extracted representations and the three external clustering
//! metrics: accuracy under optimal cluster-to-class matching (ACC),
//! normalized mutual information (NMI), and the adjusted Rand index (ARI).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::seed::derive_seed;
use crate::error::{Error, Result};

/// A hard assignment of N samples to clusters `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(assignments: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("cluster count must be positive".into()));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::IndexOutOfRange(format!(
                "assignment {bad} for k = {k}"
            )));
        }
        Ok(Self { assignments, k })
    }

    /// Builds a partition from arbitrary labels, relabeling them densely in
    /// first-appearance order.
    pub fn from_labels<L: Eq + std::hash::Hash + Copy>(labels: &[L]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut assignments = Vec::with_capacity(labels.len());
        for &l in labels {
            let next = map.len();
            let id = *map.entry(l).or_insert(next);
            assignments.push(id);
        }
        Self {
            assignments,
            k: map.len().max(1),
        }
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Output of [`kmeans`]: the winning restart's partition, centroids, and
/// within-cluster sum of squared distances.
#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub partition: Partition,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

const MAX_LLOYD_ITERS: usize = 300;

/// Lloyd's algorithm with k-means++ initialization; the best result over
/// `restarts` seeded runs is returned.
pub fn kmeans(features: ArrayView2<'_, f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansOutcome> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    if k > n {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds sample count {n}"
        )));
    }
    if restarts == 0 {
        return Err(Error::InvalidParameter("restarts must be positive".into()));
    }
    let mut best: Option<KMeansOutcome> = None;
    for r in 0..restarts {
        let outcome = lloyd_run(features, k, derive_seed(seed, "kmeans-restart", r as u64))?;
        let better = match &best {
            None => true,
            Some(b) => outcome.inertia < b.inertia,
        };
        if better {
            best = Some(outcome);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn lloyd_run(features: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KMeansOutcome> {
    let (n, d) = features.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let row = features.row(i);
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(row, centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if assignments[i] != best_c {
                assignments[i] = best_c;
                changed = true;
            }
            inertia += best_d;
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        // mean update
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let row = features.row(i);
            let mut s = sums.row_mut(a);
            for (sv, &fv) in s.iter_mut().zip(row.iter()) {
                *sv += fv;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids.row_mut(c).assign(&(&sums.row(c) * inv));
            } else {
                // Re-seed an empty cluster at the point farthest from its
                // current centroid.
                let mut far_i = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let dist = sq_dist(features.row(i), centroids.row(assignments[i]));
                    if dist > far_d {
                        far_d = dist;
                        far_i = i;
                    }
                }
                centroids.row_mut(c).assign(&features.row(far_i));
            }
        }
    }
    // Final assignment pass so inertia matches the returned centroids.
    let mut inertia = 0.0;
    for i in 0..n {
        let row = features.row(i);
        let mut best_c = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = sq_dist(row, centroids.row(c));
            if dist < best_d {
                best_d = dist;
                best_c = c;
            }
        }
        assignments[i] = best_c;
        inertia += best_d;
    }
    history.push(inertia);
    Ok(KMeansOutcome {
        partition: Partition::new(assignments, k)?,
        centroids,
        inertia,
        inertia_history: history,
    })
}

fn plus_plus_init(features: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = features.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            // D^2-weighted draw
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&features.row(pick));
        for i in 0..n {
            let dist = sq_dist(features.row(i), centroids.row(c));
            if dist < min_d[i] {
                min_d[i] = dist;
            }
        }
    }
    centroids
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Contingency table `counts[pred][truth]`.
fn contingency(truth: &Partition, pred: &Partition) -> Result<Array2<f64>> {
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "partition lengths differ: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut table = Array2::<f64>::zeros((pred.k(), truth.k()));
    for (&p, &t) in pred.assignments().iter().zip(truth.assignments()) {
        table[[p, t]] += 1.0;
    }
    Ok(table)
}

/// Clustering accuracy: the fraction of samples matched under the best
/// one-to-one mapping of predicted clusters to true classes (Hungarian
/// assignment on the contingency table).
pub fn accuracy(truth: &Partition, pred: &Partition) -> Result<f64> {
    let table = contingency(truth, pred)?;
    let n: f64 = table.sum();
    if n == 0.0 {
        return Err(Error::InvalidParameter("empty partitions".into()));
    }
    let matched = hungarian_max(&table);
    Ok(matched / n)
}

/// Maximum-sum assignment value over a rectangular non-negative matrix.
/// Rows and columns are padded to a square with zeros; ties resolve toward
/// lower indices because scanning order is fixed.
fn hungarian_max(scores: &Array2<f64>) -> f64 {
    let (r, c) = scores.dim();
    let m = r.max(c);
    // Classic O(m^3) potentials formulation on costs = -scores.
    let mut cost = vec![vec![0.0f64; m + 1]; m + 1];
    for i in 0..r {
        for j in 0..c {
            cost[i + 1][j + 1] = -scores[[i, j]];
        }
    }
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut matched_col_row = vec![0usize; m + 1]; // p[j] = row matched to column j
    for i in 1..=m {
        matched_col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0][j] - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[matched_col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_col_row[j0] = matched_col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        let i = matched_col_row[j];
        if i >= 1 && i <= r && j <= c {
            total += scores[[i - 1, j - 1]];
        }
    }
    total
}

/// Normalized mutual information, normalized by the arithmetic mean of the
/// two partition entropies. Two trivial identical partitions score 1; if
/// exactly one partition has zero entropy the score is 0.
pub fn nmi(truth: &Partition, pred: &Partition) -> Result<f64> {
    let table = contingency(truth, pred)?;
    let n: f64 = table.sum();
    if n == 0.0 {
        return Err(Error::InvalidParameter("empty partitions".into()));
    }
    let pred_sizes: Vec<f64> = table.rows().into_iter().map(|r| r.sum()).collect();
    let truth_sizes: Vec<f64> = table.columns().into_iter().map(|c| c.sum()).collect();
    let h_pred = entropy(&pred_sizes, n);
    let h_truth = entropy(&truth_sizes, n);
    if h_pred == 0.0 && h_truth == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_truth == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (pi, row) in table.rows().into_iter().enumerate() {
        for (ti, &cnt) in row.iter().enumerate() {
            if cnt > 0.0 {
                let p = cnt / n;
                mi += p * (n * cnt / (pred_sizes[pi] * truth_sizes[ti])).ln();
            }
        }
    }
    Ok(mi / (0.5 * (h_pred + h_truth)))
}

fn entropy(sizes: &[f64], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / n;
            -p * p.ln()
        })
        .sum()
}

/// Adjusted Rand index from the pair-counting contingency table. 1 for
/// identical partitions, around 0 for independent ones, negative for
/// systematic disagreement.
pub fn ari(truth: &Partition, pred: &Partition) -> Result<f64> {
    let table = contingency(truth, pred)?;
    let n: f64 = table.sum();
    if n == 0.0 {
        return Err(Error::InvalidParameter("empty partitions".into()));
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_cells: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_pred: f64 = table.rows().into_iter().map(|r| choose2(r.sum())).sum();
    let sum_truth: f64 = table.columns().into_iter().map(|c| choose2(c.sum())).sum();
    let total_pairs = choose2(n);
    if total_pairs == 0.0 {
        return Ok(1.0); // single sample: both partitions identical by force
    }
    let expected = sum_pred * sum_truth / total_pairs;
    let max_index = 0.5 * (sum_pred + sum_truth);
    let denom = max_index - expected;
    if denom == 0.0 {
        // Both partitions trivial in the same way, hence identical.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / denom)
}

/// The JSON evaluation report emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub inertia: f64,
}

/// Runs k-means against ground truth and assembles the metric report.
pub fn evaluate(
    features: ArrayView2<'_, f64>,
    truth: &Partition,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(EvalReport, KMeansOutcome)> {
    if truth.len() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} truth labels for {} feature rows",
            truth.len(),
            features.nrows()
        )));
    }
    let outcome = kmeans(features, k, seed, restarts)?;
    let report = EvalReport {
        acc: accuracy(truth, &outcome.partition)?,
        nmi: nmi(truth, &outcome.partition)?,
        ari: ari(truth, &outcome.partition)?,
        k,
        seed,
        restarts,
        inertia: outcome.inertia,
    };
    Ok((report, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::{prop_assert, proptest};

    fn part(v: &[usize]) -> Partition {
        let k = v.iter().copied().max().map_or(1, |m| m + 1);
        Partition::new(v.to_vec(), k).unwrap()
    }

    #[test]
    fn accuracy_identical_is_one() {
        let t = part(&[0, 0, 1, 1, 2]);
        assert_abs_diff_eq!(accuracy(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_permuted_labels_is_one() {
        let t = part(&[0, 0, 1, 1, 2, 2]);
        let p = part(&[2, 2, 0, 0, 1, 1]);
        assert_abs_diff_eq!(accuracy(&t, &p).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_partial_match() {
        // truth [0,0,1,1], pred [1,0,0,0]: best mapping 0->1, 1->0 gives 3/4.
        let t = part(&[0, 0, 1, 1]);
        let p = part(&[1, 0, 0, 0]);
        assert_abs_diff_eq!(accuracy(&t, &p).unwrap(), 0.75);
    }

    #[test]
    fn nmi_identical_nontrivial_is_one() {
        let t = part(&[0, 0, 1, 1, 2]);
        assert_abs_diff_eq!(nmi(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nmi_single_cluster_pred_is_zero() {
        let t = part(&[0, 0, 1, 1]);
        let p = part(&[0, 0, 0, 0]);
        assert_abs_diff_eq!(nmi(&t, &p).unwrap(), 0.0);
    }

    #[test]
    fn nmi_independent_partitions_is_zero() {
        let t = part(&[0, 0, 1, 1]);
        let p = part(&[0, 1, 0, 1]);
        assert_abs_diff_eq!(nmi(&t, &p).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nmi_both_trivial_is_one() {
        let t = part(&[0, 0, 0]);
        assert_abs_diff_eq!(nmi(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn ari_identical_is_one() {
        let t = part(&[0, 1, 1, 2]);
        assert_abs_diff_eq!(ari(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_permuted_is_one() {
        let t = part(&[0, 0, 1, 1]);
        let p = part(&[1, 1, 0, 0]);
        assert_abs_diff_eq!(ari(&t, &p).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_independent_two_by_two_is_minus_half() {
        let t = part(&[0, 0, 1, 1]);
        let p = part(&[0, 1, 0, 1]);
        assert_abs_diff_eq!(ari(&t, &p).unwrap(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn metrics_reject_length_mismatch() {
        let t = part(&[0, 1]);
        let p = part(&[0, 1, 1]);
        assert!(accuracy(&t, &p).is_err());
        assert!(nmi(&t, &p).is_err());
        assert!(ari(&t, &p).is_err());
    }

    #[test]
    fn best_constant_prediction_on_balanced_classes_is_one_over_k() {
        for k in 1..=5usize {
            let per = 4;
            let truth: Vec<usize> = (0..k * per).map(|i| i / per).collect();
            let pred = vec![0usize; k * per];
            let t = Partition::new(truth, k).unwrap();
            let p = Partition::new(pred, 1).unwrap();
            assert_abs_diff_eq!(accuracy(&t, &p).unwrap(), 1.0 / k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn kmeans_k_equals_n_gives_zero_inertia() {
        let feats = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        let out = kmeans(feats.view(), 4, 9, 4).unwrap();
        assert_abs_diff_eq!(out.inertia, 0.0, epsilon = 1e-18);
        let mut seen = out.partition.assignments().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_k_one_gives_mean_centroid() {
        let feats = array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        let out = kmeans(feats.view(), 1, 3, 2).unwrap();
        assert_abs_diff_eq!(out.centroids[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.centroids[[0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_separated_pairs_match_brute_force() {
        // Two tight pairs; the optimal 2-partition is the pair split.
        // Independent oracle: minimum inertia over every 2-partition of the
        // 4 points (computed by enumeration below).
        let feats = array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]];
        let out = kmeans(feats.view(), 2, 1, 5).unwrap();

        let mut best_inertia = f64::INFINITY;
        let mut best_mask = 0usize;
        for mask in 1..(1 << 4) - 1usize {
            let (mut sa, mut sb): (Vec<usize>, Vec<usize>) = (vec![], vec![]);
            for i in 0..4 {
                if mask & (1 << i) != 0 {
                    sa.push(i);
                } else {
                    sb.push(i);
                }
            }
            let inertia_of = |s: &[usize]| -> f64 {
                let mut mean = [0.0f64; 2];
                for &i in s {
                    mean[0] += feats[[i, 0]];
                    mean[1] += feats[[i, 1]];
                }
                mean[0] /= s.len() as f64;
                mean[1] /= s.len() as f64;
                s.iter()
                    .map(|&i| {
                        (feats[[i, 0]] - mean[0]).powi(2) + (feats[[i, 1]] - mean[1]).powi(2)
                    })
                    .sum()
            };
            let total = inertia_of(&sa) + inertia_of(&sb);
            if total < best_inertia {
                best_inertia = total;
                best_mask = mask;
            }
        }
        assert_eq!(best_mask & 0b11, 0b11, "oracle should split the pairs");
        assert_abs_diff_eq!(out.inertia, best_inertia, epsilon = 1e-9);
        let a = out.partition.assignments();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn kmeans_inertia_history_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut feats = Array2::<f64>::zeros((40, 3));
        for v in feats.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for k in [1, 2, 5, 8] {
            let out = lloyd_run(feats.view(), k, 7).unwrap();
            for w in out.inertia_history.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "inertia increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let feats = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(kmeans(feats.view(), 0, 1, 1).is_err());
        assert!(kmeans(feats.view(), 3, 1, 1).is_err());
    }

    // --- brute-force oracles on all small partition pairs ---

    /// Every partition of n items into at most n blocks, as dense labels.
    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        // restricted growth strings
        fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            let max = prefix.iter().copied().max().map_or(0, |m| m + 1);
            for next in 0..=max {
                prefix.push(next);
                rec(prefix, n, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), n, &mut out);
        out
    }

    fn brute_force_acc(truth: &[usize], pred: &[usize]) -> f64 {
        // exhaustive search over injective maps pred-cluster -> truth-cluster
        let kp = pred.iter().copied().max().unwrap_or(0) + 1;
        let kt = truth.iter().copied().max().unwrap_or(0) + 1;
        let k = kp.max(kt);
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0usize;
        // Heap's algorithm over mappings of all k labels
        fn heaps(perm: &mut Vec<usize>, size: usize, f: &mut impl FnMut(&[usize])) {
            if size == 1 {
                f(perm);
                return;
            }
            for i in 0..size {
                heaps(perm, size - 1, f);
                if size % 2 == 1 {
                    perm.swap(0, size - 1);
                } else {
                    perm.swap(i, size - 1);
                }
            }
        }
        let len = perm.len();
        heaps(&mut perm, len, &mut |p: &[usize]| {
            let correct = pred
                .iter()
                .zip(truth)
                .filter(|(&pc, &tc)| p[pc] == tc)
                .count();
            best = best.max(correct);
        });
        best as f64 / truth.len() as f64
    }

    fn brute_force_nmi(truth: &[usize], pred: &[usize]) -> f64 {
        let n = truth.len() as f64;
        let kt = truth.iter().copied().max().unwrap() + 1;
        let kp = pred.iter().copied().max().unwrap() + 1;
        let mut joint = vec![vec![0.0; kt]; kp];
        for (&p, &t) in pred.iter().zip(truth) {
            joint[p][t] += 1.0;
        }
        let pt: Vec<f64> = (0..kt)
            .map(|t| (0..kp).map(|p| joint[p][t]).sum::<f64>() / n)
            .collect();
        let pp: Vec<f64> = (0..kp).map(|p| joint[p].iter().sum::<f64>() / n).collect();
        let ht: f64 = pt.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
        let hp: f64 = pp.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
        if ht == 0.0 && hp == 0.0 {
            return 1.0;
        }
        if ht == 0.0 || hp == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for p in 0..kp {
            for t in 0..kt {
                let pj = joint[p][t] / n;
                if pj > 0.0 {
                    mi += pj * (pj / (pp[p] * pt[t])).ln();
                }
            }
        }
        mi / (0.5 * (ht + hp))
    }

    fn brute_force_ari(truth: &[usize], pred: &[usize]) -> f64 {
        // direct pair counting over every unordered sample pair
        let n = truth.len();
        let mut same_both = 0.0f64;
        let mut same_t = 0.0f64;
        let mut same_p = 0.0f64;
        let mut pairs = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                pairs += 1.0;
                let st = truth[i] == truth[j];
                let sp = pred[i] == pred[j];
                if st {
                    same_t += 1.0;
                }
                if sp {
                    same_p += 1.0;
                }
                if st && sp {
                    same_both += 1.0;
                }
            }
        }
        if pairs == 0.0 {
            return 1.0;
        }
        let expected = same_t * same_p / pairs;
        let max_index = 0.5 * (same_t + same_p);
        let denom = max_index - expected;
        if denom == 0.0 {
            return 1.0;
        }
        (same_both - expected) / denom
    }

    #[test]
    fn metrics_match_brute_force_oracles_up_to_five_points() {
        // n = 6 is covered by the acceptance suite; n <= 5 keeps this
        // unit test quick (Bell(5)^2 = 2704 pairs).
        for n in 1..=5usize {
            let parts = all_partitions(n);
            for t in &parts {
                for p in &parts {
                    let tp = Partition::from_labels(t);
                    let pp = Partition::from_labels(p);
                    let acc = accuracy(&tp, &pp).unwrap();
                    let nmi_v = nmi(&tp, &pp).unwrap();
                    let ari_v = ari(&tp, &pp).unwrap();
                    assert_abs_diff_eq!(acc, brute_force_acc(t, p), epsilon = 1e-12);
                    assert_abs_diff_eq!(nmi_v, brute_force_nmi(t, p), epsilon = 1e-12);
                    assert_abs_diff_eq!(ari_v, brute_force_ari(t, p), epsilon = 1e-12);
                }
            }
        }
    }

    proptest! {
        // All three metrics are invariant under relabeling either partition.
        #[test]
        fn metrics_invariant_under_relabeling(
            labels in proptest::collection::vec(0usize..4, 2..12),
            perm_seed in 0u64..100,
            pred in proptest::collection::vec(0usize..4, 2..12),
        ) {
            let m = labels.len().min(pred.len());
            let labels = &labels[..m];
            let pred = &pred[..m];
            let t = Partition::from_labels(labels);
            let p = Partition::from_labels(pred);
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let relabeled: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let p2 = Partition::from_labels(&relabeled);
            prop_assert!((accuracy(&t, &p).unwrap() - accuracy(&t, &p2).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(&t, &p).unwrap() - nmi(&t, &p2).unwrap()).abs() < 1e-12);
            prop_assert!((ari(&t, &p).unwrap() - ari(&t, &p2).unwrap()).abs() < 1e-12);
        }
    }
}
