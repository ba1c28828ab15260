//! K-means on embeddings and external clustering metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// `dim × n_clusters`.
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    points
        .column(i)
        .iter()
        .zip(centroids.column(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn plus_plus_init(points: &DMatrix<f64>, n_clusters: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.ncols();
    let mut centroids = DMatrix::zeros(points.nrows(), n_clusters);
    centroids.set_column(0, &points.column(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centroids, 0)).collect();
    for c in 1..n_clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.set_column(c, &points.column(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centroids, c));
        }
    }
    centroids
}

fn assign(points: &DMatrix<f64>, centroids: &DMatrix<f64>, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let (best, d) = (0..centroids.ncols())
            .map(|c| (c, sq_dist(points, i, centroids, c)))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        *label = best;
        inertia += d;
    }
    inertia
}

/// Lloyd iterations from the given centroids. Returns the result and the
/// inertia after every assignment step.
pub fn lloyd(points: &DMatrix<f64>, init: DMatrix<f64>, max_iter: usize) -> (KMeansResult, Vec<f64>) {
    let (dim, n) = points.shape();
    let k = init.ncols();
    let mut centroids = init;
    let mut labels = vec![usize::MAX; n];
    let mut next = vec![0; n];
    let mut trace = Vec::new();
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        inertia = assign(points, &centroids, &mut next);
        trace.push(inertia);
        if next == labels {
            break;
        }
        labels.clone_from(&next);
        let mut sums = DMatrix::zeros(dim, k);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let mut col = sums.column_mut(l);
            col += points.column(i);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.set_column(c, &(sums.column(c) / counts[c] as f64));
            }
        }
        // Empty clusters move to the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(points, i, &centroids, labels[i])))
                    .fold((0, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                    .0;
                centroids.set_column(c, &points.column(far));
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
            }
        }
    }
    if labels.contains(&usize::MAX) || labels != next {
        labels = next;
    }
    (
        KMeansResult {
            labels,
            centroids,
            inertia,
        },
        trace,
    )
}

/// k-means++ seeding and Lloyd refinement, best of `restarts` by inertia.
pub fn kmeans(
    points: &DMatrix<f64>,
    n_clusters: usize,
    restarts: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KMeansResult> {
    let n = points.ncols();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::param(format!(
            "cannot form {n_clusters} clusters from {n} points"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("k-means input contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(points, n_clusters, &mut rng);
        let (res, _) = lloyd(points, init, max_iter);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

// ---------------------------------------------------------------------------
// Metrics

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::input(format!(
            "predicted has {} labels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("empty label vectors"));
    }
    Ok(())
}

/// Dense relabelling to `0..count` in order of first appearance of sorted values.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    // BTreeMap iteration order gives sorted ids; rebuild so ids are sorted.
    let sorted: BTreeMap<usize, usize> = ids.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    (labels.iter().map(|l| sorted[l]).collect(), sorted.len())
}

/// `contingency[p][t]` = number of points with predicted `p` and truth `t`.
fn contingency(pred: &[usize], truth: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let (p, np) = compact(pred);
    let (t, nt) = compact(truth);
    let mut table = vec![vec![0usize; nt]; np];
    for (&a, &b) in p.iter().zip(&t) {
        table[a][b] += 1;
    }
    (table, p, t)
}

/// Maximum-weight assignment on a rectangular table; `result[row] = Some(col)`.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let max_w = weights.iter().flatten().copied().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };
    // Shortest augmenting path with potentials, 1-indexed.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
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
    let mut result = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            result[i - 1] = Some(j - 1);
        }
    }
    result
}

/// Predicted-cluster → truth-class map maximizing the number of matched points.
///
/// Among maps with the same count, the one with the largest summed per-class
/// F1 and precision wins, so the outcome never depends on label names.
fn best_mapping(pred: &[usize], truth: &[usize]) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let (table, _, _) = contingency(pred, truth);
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let n_classes = table[0].len();
    let col_sums: Vec<usize> = (0..n_classes).map(|t| table.iter().map(|r| r[t]).sum()).collect();
    // Secondary term summed over all pairs stays below 1, under one point of count.
    let scale = 1.0 / (4.0 * (row_sums.len().max(n_classes)) as f64);
    let weights: Vec<Vec<f64>> = table
        .iter()
        .enumerate()
        .map(|(p, row)| {
            row.iter()
                .enumerate()
                .map(|(t, &c)| {
                    let f1 = 2.0 * c as f64 / (row_sums[p] + col_sums[t]) as f64;
                    let prec = c as f64 / row_sums[p] as f64;
                    c as f64 + scale * (f1 + prec)
                })
                .collect()
        })
        .collect();
    let map = max_weight_assignment(&weights);
    (table, map)
}

pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let (table, map) = best_mapping(pred, truth);
    let matched: usize = map.iter().enumerate().filter_map(|(p, t)| t.map(|t| table[p][t])).sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;
    let (table, _, _) = contingency(pred, truth);
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(rows.iter().copied(), n);
    let ht = entropy(cols.iter().copied(), n);
    let same_partition = table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
        && cols
            .iter()
            .enumerate()
            .all(|(j, _)| table.iter().filter(|r| r[j] > 0).count() == 1);
    if same_partition {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (rows[p] as f64 * cols[t] as f64)).ln();
            }
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// F1 and precision over truth classes after the optimal cluster-to-class map.
///
/// Macro: per-class scores averaged (a class with no mapped cluster has
/// precision 0). Micro: pooled counts over all classes.
pub fn f1_precision(pred: &[usize], truth: &[usize], averaging: Averaging) -> Result<(f64, f64)> {
    check_lengths(pred, truth)?;
    let (table, map) = best_mapping(pred, truth);
    let n_classes = table[0].len();
    let class_sizes: Vec<usize> = (0..n_classes).map(|t| table.iter().map(|r| r[t]).sum()).collect();
    let mut tp = vec![0usize; n_classes];
    let mut predicted_pos = vec![0usize; n_classes];
    for (p, t) in map.iter().enumerate() {
        if let Some(t) = *t {
            tp[t] = table[p][t];
            predicted_pos[t] = table[p].iter().sum();
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f1_of = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    match averaging {
        Averaging::Macro => {
            let mut f1 = 0.0;
            let mut prec = 0.0;
            for t in 0..n_classes {
                let p = ratio(tp[t], predicted_pos[t]);
                let r = ratio(tp[t], class_sizes[t]);
                prec += p;
                f1 += f1_of(p, r);
            }
            Ok((f1 / n_classes as f64, prec / n_classes as f64))
        }
        Averaging::Micro => {
            let tp_sum: usize = tp.iter().sum();
            let p = ratio(tp_sum, predicted_pos.iter().sum());
            let r = ratio(tp_sum, pred.len());
            Ok((f1_of(p, r), p))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub predicted: Vec<usize>,
    pub accuracy: f64,
    pub nmi: f64,
    pub f1: f64,
    pub precision: f64,
    pub n_clusters: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl ClusterReport {
    pub fn evaluate(
        predicted: Vec<usize>,
        truth: &[usize],
        n_clusters: usize,
        seed: u64,
        restarts: usize,
        averaging: Averaging,
    ) -> Result<Self> {
        let accuracy = hungarian_accuracy(&predicted, truth)?;
        let nmi = nmi(&predicted, truth)?;
        let (f1, precision) = f1_precision(&predicted, truth, averaging)?;
        Ok(Self {
            predicted,
            accuracy,
            nmi,
            f1,
            precision,
            n_clusters,
            seed,
            restarts,
        })
    }

    /// `key = value` lines under an optional prefix.
    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}accuracy = {:.6}", self.accuracy);
        let _ = writeln!(s, "{prefix}nmi = {:.6}", self.nmi);
        let _ = writeln!(s, "{prefix}f1 = {:.6}", self.f1);
        let _ = writeln!(s, "{prefix}precision = {:.6}", self.precision);
        let _ = writeln!(s, "{prefix}n_clusters = {}", self.n_clusters);
        let _ = writeln!(s, "{prefix}seed = {}", self.seed);
        let _ = writeln!(s, "{prefix}restarts = {}", self.restarts);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pts(cols: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i])
    }

    #[test]
    fn two_points_two_clusters() {
        let p = pts(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let r = kmeans(&p, 2, 3, 50, 1).unwrap();
        assert_ne!(r.labels[0], r.labels[1]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let p = pts(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, -1.0]]);
        let r = kmeans(&p, 1, 1, 10, 0).unwrap();
        assert!((r.centroids[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r.centroids[(1, 0)] - 1.0).abs() < 1e-12);
        assert!(matches!(kmeans(&p, 4, 1, 10, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn planted_blobs_match_exhaustive_partitions() {
        let xs = [0.0, 0.3, -0.2, 0.5, 6.0, 6.4, 5.7, 6.1];
        let ys = [0.1, -0.4, 0.2, 0.0, 5.0, 5.3, 4.6, 5.1];
        let p = DMatrix::from_fn(2, 8, |i, j| if i == 0 { xs[j] } else { ys[j] });
        let inertia_of = |mask: u32| {
            let mut total = 0.0;
            for side in [0, 1] {
                let members: Vec<usize> = (0..8).filter(|&j| (mask >> j) & 1 == side).collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let c = p.select_columns(&members).column_mean();
                total += members.iter().map(|&j| (p.column(j) - &c).norm_squared()).sum::<f64>();
            }
            total
        };
        let best = (1u32..(1 << 7)).map(inertia_of).fold(f64::INFINITY, f64::min);
        let r = kmeans(&p, 2, 10, 100, 3).unwrap();
        assert!((r.inertia - best).abs() < 1e-12);
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DMatrix::from_fn(3, 60, |_, _| rng.gen_range(-1.0..1.0));
        let init = p.columns(0, 5).into_owned();
        let (_, trace) = lloyd(&p, init, 100);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let p = pts(&[&[0.0], &[0.1], &[5.0], &[5.2]]);
        // third centroid far from everything starts empty
        let init = pts(&[&[0.0], &[5.0], &[100.0]]);
        let (r, _) = lloyd(&p, init, 20);
        let mut used = r.labels.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 3);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(hungarian_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(hungarian_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(hungarian_accuracy(&[0], &[0, 1]), Err(Error::InvalidInput(_))));
        // more clusters than classes
        assert_eq!(hungarian_accuracy(&[0, 1, 2, 2], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[2, 2, 5, 5], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);

        // truth [0,0,1,1], predicted [0,1,1,1]: direct entropies
        let v = nmi(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        let ln = f64::ln;
        let ht = ln(2.0);
        let hp = -(0.25 * ln(0.25) + 0.75 * ln(0.75));
        let mi = 0.25 * ln(0.25 / (0.25 * 0.5)) + 0.25 * ln(0.25 / (0.75 * 0.5)) + 0.5 * ln(0.5 / (0.75 * 0.5));
        assert!((v - mi / (hp * ht).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn f1_precision_examples() {
        let (f1, p) = f1_precision(&[0, 0, 0, 1], &[0, 0, 1, 1], Averaging::Macro).unwrap();
        assert!((p - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(
            f1_precision(&[1, 1, 0, 0], &[0, 0, 1, 1], Averaging::Macro).unwrap(),
            (1.0, 1.0)
        );
        let (mf1, mp) = f1_precision(&[0, 0, 0, 1], &[0, 0, 1, 1], Averaging::Micro).unwrap();
        assert!((mf1 - 0.75).abs() < 1e-12 && (mp - 0.75).abs() < 1e-12);
        // class 1 gets no cluster: precision 0 for it
        let (_, p) = f1_precision(&[0, 0, 0, 0], &[0, 0, 1, 1], Averaging::Macro).unwrap();
        assert!((p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_key_values() {
        let r = ClusterReport::evaluate(vec![0, 0, 1, 1], &[1, 1, 0, 0], 2, 7, 10, Averaging::Macro).unwrap();
        let kv = r.to_key_values("full.");
        assert!(kv.contains("full.accuracy = 1.000000"));
        assert!(kv.contains("full.seed = 7"));
    }

    fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..12).prop_flat_map(|n| (prop::collection::vec(0usize..3, n), prop::collection::vec(0usize..3, n)))
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_relabeling((pred, truth) in labels_strategy(), perm in prop::sample::select(vec![[0usize, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]])) {
            let relabeled: Vec<usize> = pred.iter().map(|&l| perm[l] + 10).collect();
            prop_assert_eq!(hungarian_accuracy(&pred, &truth).unwrap(), hungarian_accuracy(&relabeled, &truth).unwrap());
            prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&relabeled, &truth).unwrap()).abs() < 1e-12);
            for avg in [Averaging::Macro, Averaging::Micro] {
                let a = f1_precision(&pred, &truth, avg).unwrap();
                let b = f1_precision(&relabeled, &truth, avg).unwrap();
                prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
            }
        }

        #[test]
        fn accuracy_matches_exhaustive_maps((pred, truth) in labels_strategy()) {
            // every injective map from the 3 cluster ids to the 3 class ids
            let mut best = 0usize;
            for perm in [[0usize, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
                best = best.max(pred.iter().zip(&truth).filter(|(&p, &t)| perm[p] == t).count());
            }
            prop_assert_eq!(hungarian_accuracy(&pred, &truth).unwrap(), best as f64 / pred.len() as f64);
        }

        #[test]
        fn accuracy_bounds_and_nmi_symmetric((pred, truth) in labels_strategy()) {
            // any single matched cell is a feasible assignment
            let mut cells = [[0usize; 3]; 3];
            pred.iter().zip(&truth).for_each(|(&p, &t)| cells[p][t] += 1);
            let best_cell = *cells.iter().flatten().max().unwrap() as f64 / truth.len() as f64;
            prop_assert!(hungarian_accuracy(&pred, &truth).unwrap() >= best_cell - 1e-15);
            prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&truth, &pred).unwrap()).abs() < 1e-12);
            let v = nmi(&pred, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
