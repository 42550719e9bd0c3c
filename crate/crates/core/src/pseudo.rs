//! Per-epoch clustering of target features into pseudo-identities.

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DiagnosticIds;
use crate::embedding::{l2_normalize_rows, Branch};
use crate::error::{Error, Result};
use crate::tape::pairwise_distances;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanParams {
    /// Percentile (in percent) of the pairwise-distance distribution used as eps.
    pub eps_percentile: f64,
    /// Fixed eps; overrides the percentile rule when set.
    #[serde(default)]
    pub eps: Option<f64>,
    pub min_pts: usize,
    /// Retries with eps multiplied by `relax_factor` when nothing clusters.
    pub max_retries: usize,
    pub relax_factor: f64,
    /// Number of points used to estimate the distance percentile.
    pub subsample: usize,
    pub normalize: bool,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps_percentile: 0.16,
            eps: None,
            min_pts: 4,
            max_retries: 3,
            relax_factor: 1.5,
            subsample: 2000,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub normalize: bool,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            k: 16,
            max_iter: 100,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ClusterParams {
    Dbscan(DbscanParams),
    Kmeans(KmeansParams),
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams::Dbscan(DbscanParams::default())
    }
}

/// Cluster assignments of one epoch. `None` marks an outlier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub assignments: Vec<Option<usize>>,
    pub centroids: Array2<f64>,
    pub epoch: usize,
    pub branch: Branch,
    pub feature_snapshot_norm: bool,
    /// DBSCAN radius actually used, after any relaxation.
    #[serde(default)]
    pub eps: Option<f64>,
}

impl PseudoLabeling {
    /// Builds a labeling from assignments, computing centroids as member means.
    /// Empty cluster indices are dropped and the rest compacted in order.
    pub fn from_assignments(
        features: &Array2<f64>,
        assignments: Vec<Option<usize>>,
        epoch: usize,
        branch: Branch,
        normalized: bool,
    ) -> Result<Self> {
        if assignments.len() != features.nrows() {
            return Err(Error::invalid(format!(
                "{} assignments for {} samples",
                assignments.len(),
                features.nrows()
            )));
        }
        let max = assignments
            .iter()
            .flatten()
            .copied()
            .max()
            .map_or(0, |m| m + 1);
        let mut used = vec![false; max];
        for a in assignments.iter().flatten() {
            used[*a] = true;
        }
        let mut remap = vec![None; max];
        let mut next = 0;
        for (k, u) in used.iter().enumerate() {
            if *u {
                remap[k] = Some(next);
                next += 1;
            }
        }
        let assignments: Vec<Option<usize>> = assignments
            .iter()
            .map(|a| a.and_then(|a| remap[a]))
            .collect();
        let centroids = member_means(features, &assignments, next);
        Ok(Self {
            assignments,
            centroids,
            epoch,
            branch,
            feature_snapshot_norm: normalized,
            eps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn num_outliers(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_none()).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for a in self.assignments.iter().flatten() {
            sizes[*a] += 1;
        }
        sizes
    }

    /// Sample indices per cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.num_clusters()];
        for (i, a) in self.assignments.iter().enumerate() {
            if let Some(a) = a {
                m[*a].push(i);
            }
        }
        m
    }

    pub fn centroid_of(&self, sample_index: usize) -> Result<Option<ArrayView1<'_, f64>>> {
        let a = self.assignments.get(sample_index).ok_or_else(|| {
            Error::invalid(format!(
                "sample {sample_index} out of range for a labeling of {}",
                self.len()
            ))
        })?;
        Ok(a.map(|k| self.centroids.row(k)))
    }

    /// Largest deviation between stored centroids and member means of `features`.
    pub fn centroid_error(&self, features: &Array2<f64>) -> f64 {
        let mut f = features.clone();
        if self.feature_snapshot_norm {
            l2_normalize_rows(&mut f);
        }
        let recomputed = member_means(&f, &self.assignments, self.num_clusters());
        (&recomputed - &self.centroids)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Reindexes clusters by lexicographic order of their centroids, ties
    /// going to the cluster whose first member comes earlier.
    pub fn canonicalize(&self) -> PseudoLabeling {
        let k = self.num_clusters();
        let mut first = vec![usize::MAX; k];
        for (i, a) in self.assignments.iter().enumerate().rev() {
            if let Some(a) = *a {
                first[a] = i;
            }
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let ra = self.centroids.row(a);
            let rb = self.centroids.row(b);
            ra.iter()
                .zip(rb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(first[a].cmp(&first[b]))
                .then(a.cmp(&b))
        });
        let mut new_index = vec![0; k];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let centroids = self.centroids.select(Axis(0), &order);
        PseudoLabeling {
            assignments: self
                .assignments
                .iter()
                .map(|a| a.map(|a| new_index[a]))
                .collect(),
            centroids,
            ..self.clone()
        }
    }

    /// Equality up to cluster reindexing.
    pub fn same_partition(&self, other: &PseudoLabeling) -> bool {
        let a = self.canonicalize();
        let b = other.canonicalize();
        a.assignments == b.assignments && a.centroids == b.centroids
    }

    /// Per-sample centroids for `indices`, `None` for outliers.
    pub fn centroids_for(&self, indices: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
        indices
            .iter()
            .map(|&i| Ok(self.centroid_of(i)?.map(|c| c.to_vec())))
            .collect()
    }

    /// Number of non-outlier samples.
    pub fn num_assigned(&self) -> usize {
        self.len() - self.num_outliers()
    }
}

fn member_means(features: &Array2<f64>, assignments: &[Option<usize>], k: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((k, features.ncols()));
    let mut counts = vec![0usize; k];
    for (i, a) in assignments.iter().enumerate() {
        if let Some(a) = *a {
            let mut row = sums.row_mut(a);
            row += &features.row(i);
            counts[a] += 1;
        }
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    sums
}

/// Density-based clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`. Points are visited in index order and
/// a border point joins the first cluster that reaches it.
pub fn dbscan(features: &Array2<f64>, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = features.nrows();
    let d = pairwise_distances(features);
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d[[i, j]] <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i].is_some() || !core[i] {
            continue;
        }
        labels[i] = Some(next);
        let mut queue = vec![i];
        while let Some(p) = queue.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    queue.push(q);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Deterministic k-means with k-means++ seeding.
pub fn kmeans(features: &Array2<f64>, k: usize, max_iter: usize, seed: u64) -> Result<Vec<usize>> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 {
                    pick = Some(i);
                    if target < b {
                        break;
                    }
                    target -= b;
                }
            }
            pick.expect("positive mass")
        } else {
            // only duplicates remain
            (0..n).find(|i| !chosen.contains(i)).expect("k <= N")
        };
        chosen.push(pick);
        for i in 0..n {
            best[i] = best[i].min(sq(features.row(i), features.row(pick)));
        }
    }
    let mut centers = features.select(Axis(0), &chosen);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for i in 0..n {
            let mut arg = 0;
            let mut dist = f64::INFINITY;
            for c in 0..k {
                let v = sq(features.row(i), centers.row(c));
                if v < dist {
                    dist = v;
                    arg = c;
                }
            }
            if assign[i] != arg {
                assign[i] = arg;
                changed = true;
            }
        }
        let opt: Vec<Option<usize>> = assign.iter().map(|&a| Some(a)).collect();
        let means = member_means(features, &opt, k);
        let mut counts = vec![0; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&means.row(c));
            }
        }
        if !changed {
            break;
        }
    }
    Ok(assign)
}

/// The `percentile`-th percentile (in percent) of pairwise distances, over a
/// deterministic subsample of at most `subsample` rows.
pub fn distance_percentile(
    features: &Array2<f64>,
    percentile: f64,
    subsample: usize,
    seed: u64,
) -> f64 {
    let n = features.nrows();
    let rows: Array2<f64> = if n > subsample && subsample >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, subsample).into_vec();
        idx.sort_unstable();
        features.select(Axis(0), &idx)
    } else {
        features.clone()
    };
    let d = pairwise_distances(&rows);
    let m = rows.nrows();
    let mut pairs = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            pairs.push(d[[i, j]]);
        }
    }
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * pairs.len() as f64).ceil() as usize;
    pairs[rank.clamp(1, pairs.len()) - 1]
}

/// Clusters one epoch's feature snapshot.
///
/// DBSCAN yielding no cluster is retried with a relaxed eps; when every retry
/// fails the result is [`Error::NoClusters`], which callers treat as "skip
/// this epoch's fine-tuning".
pub fn cluster_epoch(
    features: &Array2<f64>,
    params: &ClusterParams,
    epoch: usize,
    branch: Branch,
    seed: u64,
) -> Result<PseudoLabeling> {
    let n = features.nrows();
    match params {
        ClusterParams::Dbscan(p) => {
            if p.min_pts == 0 || n < p.min_pts {
                return Err(Error::invalid(format!(
                    "DBSCAN needs at least minPts={} samples, got {n}",
                    p.min_pts
                )));
            }
            let mut f = features.clone();
            if p.normalize {
                l2_normalize_rows(&mut f);
            }
            let mut eps = match p.eps {
                Some(e) => e,
                None => distance_percentile(&f, p.eps_percentile, p.subsample, seed),
            };
            for attempt in 0..=p.max_retries {
                let assignments = dbscan(&f, eps, p.min_pts);
                if assignments.iter().any(|a| a.is_some()) {
                    let mut l = PseudoLabeling::from_assignments(
                        &f,
                        assignments,
                        epoch,
                        branch,
                        p.normalize,
                    )?;
                    l.eps = Some(eps);
                    return Ok(l);
                }
                if attempt < p.max_retries {
                    log::warn!(
                        "epoch {epoch} branch {branch}: no clusters at eps={eps:.5}, relaxing"
                    );
                    eps *= p.relax_factor;
                }
            }
            Err(Error::NoClusters { eps })
        }
        ClusterParams::Kmeans(p) => {
            let mut f = features.clone();
            if p.normalize {
                l2_normalize_rows(&mut f);
            }
            let assign = kmeans(&f, p.k, p.max_iter, seed)?;
            PseudoLabeling::from_assignments(
                &f,
                assign.into_iter().map(Some).collect(),
                epoch,
                branch,
                p.normalize,
            )
        }
    }
}

/// Ground-truth identities none of whose samples received a pseudo-label.
/// Distractors and unlabeled samples are ignored.
pub fn lost_ids(labeling: &PseudoLabeling, ids: &DiagnosticIds) -> Result<usize> {
    if ids.len() != labeling.len() {
        return Err(Error::invalid(format!(
            "{} diagnostic ids for a labeling of {}",
            ids.len(),
            labeling.len()
        )));
    }
    let mut present = std::collections::BTreeMap::<u32, bool>::new();
    for (id, a) in ids.ids().iter().zip(&labeling.assignments) {
        if let Some(id) = id {
            *present.entry(*id).or_insert(false) |= a.is_some();
        }
    }
    Ok(present.values().filter(|p| !**p).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn blobs(sigma: f64, per: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let means = array![[0.0, 0.0, 10.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let x = Array2::from_shape_fn((3 * per, 3), |(i, j)| {
            means[[i / per, j]] + normal.sample(&mut rng)
        });
        (x, means)
    }

    fn raw_dbscan(eps: f64) -> ClusterParams {
        ClusterParams::Dbscan(DbscanParams {
            eps: Some(eps),
            normalize: false,
            ..DbscanParams::default()
        })
    }

    #[test]
    fn dbscan_recovers_blobs() {
        let sigma = 0.05;
        let per = 20;
        let (x, means) = blobs(sigma, per, 1);
        let l = cluster_epoch(&x, &raw_dbscan(1.0), 0, Branch::Full, 0).unwrap();
        assert_eq!(l.num_clusters(), 3);
        assert_eq!(l.num_outliers(), 0);
        // each cluster is exactly one blob
        for members in l.members() {
            let blob = members[0] / per;
            assert!(members.iter().all(|m| m / per == blob));
            let c = l.centroids.row(l.assignments[members[0]].unwrap());
            let dev = (&c - &means.row(blob))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dev < 3.0 * sigma / (per as f64).sqrt());
        }
        assert!(l.centroid_error(&x) < 1e-12);
    }

    #[test]
    fn isolated_point_is_outlier() {
        let (mut x, _) = blobs(0.05, 6, 2);
        x.row_mut(17).assign(&array![100.0, 100.0, 100.0]);
        let l = cluster_epoch(&x, &raw_dbscan(1.0), 0, Branch::Full, 0).unwrap();
        assert_eq!(l.assignments[17], None);
        assert_eq!(l.num_outliers(), 1);
    }

    #[test]
    fn no_clusters_after_retries() {
        let x = Array2::from_shape_fn((8, 2), |(i, j)| (i * 100 + j) as f64);
        let err = cluster_epoch(&x, &raw_dbscan(0.5), 0, Branch::Full, 0).unwrap_err();
        match err {
            Error::NoClusters { eps } => assert!((eps - 0.5 * 1.5f64.powi(3)).abs() < 1e-12),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn relaxation_rescues_epoch() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [50.0]];
        let l = cluster_epoch(&x, &raw_dbscan(0.9), 0, Branch::Full, 0).unwrap();
        assert_eq!(l.num_clusters(), 1);
        // 0.9 and 1.35 leave every point with fewer than 4 neighbours
        assert!((l.eps.unwrap() - 0.9 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_for_min_pts() {
        let x = Array2::zeros((3, 2));
        assert!(cluster_epoch(&x, &raw_dbscan(1.0), 0, Branch::Full, 0).is_err());
    }

    #[test]
    fn kmeans_with_k_equal_n() {
        let x = array![[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0], [4.0, 4.0]];
        let p = ClusterParams::Kmeans(KmeansParams {
            k: 4,
            max_iter: 10,
            normalize: false,
        });
        let l = cluster_epoch(&x, &p, 0, Branch::Full, 3).unwrap();
        assert_eq!(l.num_clusters(), 4);
        for i in 0..4 {
            assert_eq!(l.centroid_of(i).unwrap().unwrap(), x.row(i));
        }
        assert!(cluster_epoch(
            &x,
            &ClusterParams::Kmeans(KmeansParams {
                k: 5,
                ..KmeansParams::default()
            }),
            0,
            Branch::Full,
            0
        )
        .is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (x, _) = blobs(0.5, 10, 4);
        let p = ClusterParams::Kmeans(KmeansParams {
            k: 3,
            ..KmeansParams::default()
        });
        let a = cluster_epoch(&x, &p, 0, Branch::Full, 9).unwrap();
        let b = cluster_epoch(&x, &p, 0, Branch::Full, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.centroid_error(&x) < 1e-12);
    }

    #[test]
    fn centroid_lookup() {
        let x = array![[0.0, 0.0], [2.0, 4.0], [9.0, 9.0], [5.0, 5.0]];
        let l = PseudoLabeling::from_assignments(
            &x,
            vec![Some(3), Some(3), Some(1), None],
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        assert_eq!(l.num_clusters(), 2);
        assert_eq!(l.centroid_of(0).unwrap().unwrap(), array![1.0, 2.0]);
        assert_eq!(l.centroid_of(2).unwrap().unwrap(), x.row(2));
        assert!(l.centroid_of(3).unwrap().is_none());
        assert!(l.centroid_of(4).is_err());
    }

    #[test]
    fn lost_id_counting() {
        let x = Array2::zeros((6, 2));
        let ids = DiagnosticIds::new(vec![Some(1), Some(1), Some(2), Some(2), Some(3), None]);
        let all =
            PseudoLabeling::from_assignments(&x, vec![Some(0); 6], 0, Branch::Full, false).unwrap();
        assert_eq!(lost_ids(&all, &ids).unwrap(), 0);
        let one_lost = PseudoLabeling::from_assignments(
            &x,
            vec![Some(0), Some(0), None, None, Some(1), None],
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        assert_eq!(lost_ids(&one_lost, &ids).unwrap(), 1);
        let partial = PseudoLabeling::from_assignments(
            &x,
            vec![Some(0), None, Some(0), None, Some(1), None],
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        assert_eq!(lost_ids(&partial, &ids).unwrap(), 0);
    }

    #[test]
    fn canonical_form_ignores_permutation() {
        let x = array![[0.0, 1.0], [0.1, 1.0], [5.0, 0.0], [5.1, 0.0], [3.0, 3.0]];
        let a = PseudoLabeling::from_assignments(
            &x,
            vec![Some(0), Some(0), Some(1), Some(1), None],
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        let b = PseudoLabeling::from_assignments(
            &x,
            vec![Some(1), Some(1), Some(0), Some(0), None],
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        assert_ne!(a.assignments, b.assignments);
        assert_eq!(a.canonicalize(), b.canonicalize());
        assert!(a.same_partition(&b));
        let c = a.canonicalize();
        for i in 0..5 {
            assert_eq!(a.centroid_of(i).unwrap(), c.centroid_of(i).unwrap());
        }
    }

    #[test]
    fn percentile_of_known_distances() {
        let x = array![[0.0], [1.0], [3.0]];
        // pair distances 1, 2, 3
        assert_eq!(distance_percentile(&x, 0.16, 100, 0), 1.0);
        assert_eq!(distance_percentile(&x, 50.0, 100, 0), 2.0);
        assert_eq!(distance_percentile(&x, 100.0, 100, 0), 3.0);
    }
}
