//! Retrieval scoring, information-theoretic diagnostics and projections.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, DiagnosticIds};
use crate::error::{Error, Result};
use crate::pseudo::{kmeans, PseudoLabeling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Average precision of every evaluated query, in query order.
    pub per_query_ap: Vec<f64>,
    /// Queries with no true match left after filtering.
    pub excluded_queries: usize,
}

/// One side of a retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalSet<'a> {
    pub features: &'a Array2<f64>,
    pub ids: &'a [u32],
    pub cameras: &'a [usize],
    /// Entries that never count as a match (gallery distractors).
    pub distractor: &'a [bool],
}

impl RetrievalSet<'_> {
    fn check(&self, what: &str) -> Result<()> {
        let n = self.features.nrows();
        if self.ids.len() != n || self.cameras.len() != n || self.distractor.len() != n {
            return Err(Error::invalid(format!(
                "{what}: metadata length does not match {n} feature rows"
            )));
        }
        Ok(())
    }
}

fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    crate::embedding::l2_normalize_rows(&mut out);
    out
}

/// Cosine distance `1 − cos` between every query and gallery row.
pub fn cosine_distances(query: &Array2<f64>, gallery: &Array2<f64>) -> Array2<f64> {
    let q = unit_rows(query);
    let g = unit_rows(gallery);
    q.dot(&g.t()).mapv(|c| 1.0 - c)
}

/// Average precision of a ranked list of match flags.
pub fn average_precision(matches: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Distances closer than this count as tied, so rounding noise cannot
/// reorder geometrically equal gallery entries.
pub const DISTANCE_TIE_TOLERANCE: f64 = 1e-9;

fn rank_key(d: f64) -> i64 {
    (d / DISTANCE_TIE_TOLERANCE).round() as i64
}

/// Ranks the gallery for every query by cosine distance (ties by gallery
/// index), drops same-camera gallery entries and scores R1 and AP.
pub fn score_retrieval(
    query: RetrievalSet<'_>,
    gallery: RetrievalSet<'_>,
) -> Result<RetrievalResult> {
    query.check("query")?;
    gallery.check("gallery")?;
    if query.features.ncols() != gallery.features.ncols() {
        return Err(Error::invalid("query and gallery feature widths differ"));
    }
    let dist = cosine_distances(query.features, gallery.features);
    let mut per_query_ap = Vec::new();
    let mut hits = 0usize;
    let mut excluded = 0usize;
    for qi in 0..query.features.nrows() {
        let mut order: Vec<usize> = (0..gallery.features.nrows())
            .filter(|&g| gallery.cameras[g] != query.cameras[qi])
            .collect();
        let row = dist.row(qi);
        order.sort_by_key(|&g| (rank_key(row[g]), g));
        let matches: Vec<bool> = order
            .iter()
            .map(|&g| !gallery.distractor[g] && gallery.ids[g] == query.ids[qi])
            .collect();
        match average_precision(&matches) {
            Some(ap) => {
                per_query_ap.push(ap);
                if matches[0] {
                    hits += 1;
                }
            }
            None => excluded += 1,
        }
    }
    if per_query_ap.is_empty() {
        return Err(Error::invalid(format!(
            "none of the {} queries has a true match in the filtered gallery",
            query.features.nrows()
        )));
    }
    if excluded > 0 {
        log::info!("{excluded} queries without a cross-camera match were excluded");
    }
    let n = per_query_ap.len() as f64;
    Ok(RetrievalResult {
        rank1: hits as f64 / n,
        map: per_query_ap.iter().sum::<f64>() / n,
        per_query_ap,
        excluded_queries: excluded,
    })
}

/// Scores precomputed features of a query and a gallery split.
pub fn retrieve_and_score(
    query: &DatasetSplit,
    gallery: &DatasetSplit,
    query_features: &Array2<f64>,
    gallery_features: &Array2<f64>,
) -> Result<RetrievalResult> {
    let meta = |s: &DatasetSplit| -> Result<(Vec<u32>, Vec<usize>, Vec<bool>)> {
        let mut ids = Vec::with_capacity(s.len());
        for (i, x) in s.samples().iter().enumerate() {
            ids.push(x.person_id.ok_or_else(|| {
                Error::invalid(format!("{} sample {i} has no identity", s.role().name()))
            })?);
        }
        Ok((
            ids,
            s.cameras(),
            s.samples().iter().map(|x| x.distractor).collect(),
        ))
    };
    let (qi, qc, qd) = meta(query)?;
    let (gi, gc, gd) = meta(gallery)?;
    score_retrieval(
        RetrievalSet {
            features: query_features,
            ids: &qi,
            cameras: &qc,
            distractor: &qd,
        },
        RetrievalSet {
            features: gallery_features,
            ids: &gi,
            cameras: &gc,
            distractor: &gd,
        },
    )
}

/// Sums non-negative terms in a fixed order so that equal multisets of terms
/// give bitwise-equal totals.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn counts<T: Ord + Copy>(xs: impl Iterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Plug-in entropy in nats.
pub fn entropy<T: Ord + Copy>(labels: &[T]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("entropy of an empty sample"));
    }
    let n = labels.len() as f64;
    Ok(ordered_sum(
        counts(labels.iter().copied())
            .values()
            .map(|&c| (c as f64 / n) * (n / c as f64).ln())
            .collect(),
    ))
}

/// Plug-in mutual information between two label sequences, in nats.
pub fn mutual_information<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "label lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("mutual information of an empty sample"));
    }
    let n = a.len();
    let ca = counts(a.iter().copied());
    let cb = counts(b.iter().copied());
    let joint = counts(a.iter().copied().zip(b.iter().copied()));
    let nf = n as f64;
    let terms = joint
        .iter()
        .map(|((x, y), &c)| {
            let c = c as f64;
            let marg = (ca[x] * cb[y]) as f64;
            (c / nf) * (c * nf / marg).ln()
        })
        .collect();
    Ok(ordered_sum(terms).max(0.0))
}

/// Mutual information with pseudo-label outliers dropped pairwise.
pub fn mutual_information_masked<B: Ord + Copy>(a: &[Option<usize>], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "label lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (x, y): (Vec<usize>, Vec<B>) = a
        .iter()
        .zip(b)
        .filter_map(|(a, b)| a.map(|a| (a, *b)))
        .unzip();
    mutual_information(&x, &y)
}

/// Normalized mutual information (arithmetic-mean normalization). Two
/// constant labelings are treated as identical and score 1.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    let mi = mutual_information(a, b)?;
    let ha = entropy(a)?;
    let hb = entropy(b)?;
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

fn shannon(p: &[f64]) -> f64 {
    ordered_sum(
        p.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| -x * x.ln())
            .collect(),
    )
}

/// Generalized Jensen-Shannon divergence with uniform weights:
/// `H(mean) − mean H`, computed as the mean KL divergence to the mixture.
pub fn jsd_multi(distributions: &[Vec<f64>]) -> Result<f64> {
    let first = distributions
        .first()
        .ok_or_else(|| Error::invalid("no distributions"))?;
    let s = first.len();
    for (i, d) in distributions.iter().enumerate() {
        if d.len() != s {
            return Err(Error::invalid(format!(
                "distribution {i} has support {}, expected {s}",
                d.len()
            )));
        }
        if d.iter().any(|&p| !(p >= 0.0)) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "distribution {i} is not normalized"
            )));
        }
    }
    if distributions.iter().all(|d| d == first) {
        return Ok(0.0);
    }
    let k = distributions.len() as f64;
    let mixture: Vec<f64> = (0..s)
        .map(|j| distributions.iter().map(|d| d[j]).sum::<f64>() / k)
        .collect();
    let kl: f64 = distributions
        .iter()
        .map(|d| {
            d.iter()
                .zip(&mixture)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum();
    Ok((kl / k).max(0.0))
}

/// `H(mean) − mean H`, for cross-checking [`jsd_multi`].
pub fn jsd_by_entropies(distributions: &[Vec<f64>]) -> f64 {
    let k = distributions.len() as f64;
    let s = distributions[0].len();
    let mixture: Vec<f64> = (0..s)
        .map(|j| distributions.iter().map(|d| d[j]).sum::<f64>() / k)
        .collect();
    shannon(&mixture) - distributions.iter().map(|d| shannon(d)).sum::<f64>() / k
}

/// Alignment of per-camera feature distributions: features are quantized by
/// k-means on the pooled set, then per-camera histograms are compared.
pub fn quantized_camera_jsd(
    features: &Array2<f64>,
    cameras: &[usize],
    bins: usize,
    seed: u64,
) -> Result<f64> {
    if cameras.len() != features.nrows() {
        return Err(Error::invalid("camera count does not match features"));
    }
    let codes = kmeans(features, bins.min(features.nrows()), 50, seed)?;
    let cams: Vec<usize> = counts(cameras.iter().copied()).into_keys().collect();
    let hists: Vec<Vec<f64>> = cams
        .iter()
        .map(|&c| {
            let mut h = vec![0.0; bins];
            let mut n = 0.0;
            for (code, cam) in codes.iter().zip(cameras) {
                if *cam == c {
                    h[*code] += 1.0;
                    n += 1.0;
                }
            }
            h.iter_mut().for_each(|v| *v /= n);
            h
        })
        .collect();
    jsd_multi(&hists)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub purity: f64,
    pub nmi: f64,
}

/// Purity and NMI of pseudo-labels against ground truth, outliers and
/// unlabeled samples excluded.
pub fn cluster_quality(labeling: &PseudoLabeling, ids: &DiagnosticIds) -> Result<ClusterQuality> {
    if ids.len() != labeling.len() {
        return Err(Error::invalid(format!(
            "{} diagnostic ids for a labeling of {}",
            ids.len(),
            labeling.len()
        )));
    }
    let (pseudo, truth): (Vec<usize>, Vec<u32>) = labeling
        .assignments
        .iter()
        .zip(ids.ids())
        .filter_map(|(a, id)| Some(((*a)?, (*id)?)))
        .unzip();
    if pseudo.is_empty() {
        return Err(Error::invalid("every sample is an outlier"));
    }
    let mut per_cluster: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&p, &t) in pseudo.iter().zip(&truth) {
        *per_cluster.entry(p).or_default().entry(t).or_insert(0) += 1;
    }
    let majority: usize = per_cluster
        .values()
        .map(|m| *m.values().max().expect("non-empty"))
        .sum();
    Ok(ClusterQuality {
        purity: majority as f64 / pseudo.len() as f64,
        nmi: nmi(&pseudo, &truth)?,
    })
}

/// MI between ground-truth identity and camera (the reference level for
/// pseudo-label/camera dependence).
pub fn id_camera_mutual_information(ids: &DiagnosticIds, cameras: &[usize]) -> Result<f64> {
    if ids.len() != cameras.len() {
        return Err(Error::invalid("camera count does not match diagnostic ids"));
    }
    let (a, b): (Vec<u32>, Vec<usize>) = ids
        .ids()
        .iter()
        .zip(cameras)
        .filter_map(|(id, c)| Some(((*id)?, *c)))
        .unzip();
    mutual_information(&a, &b)
}

/// Training-set accuracy of a nearest-camera-mean classifier on L2-normalized
/// features: how readable the camera is from the embedding.
pub fn camera_probe_accuracy(features: &Array2<f64>, cameras: &[usize]) -> Result<f64> {
    if cameras.len() != features.nrows() || cameras.is_empty() {
        return Err(Error::invalid(
            "camera probe needs one camera per feature row",
        ));
    }
    let f = unit_rows(features);
    let k = cameras.iter().max().expect("non-empty") + 1;
    let mut means = Array2::<f64>::zeros((k, f.ncols()));
    let mut n = vec![0usize; k];
    for (row, &c) in f.rows().into_iter().zip(cameras) {
        let mut m = means.row_mut(c);
        m += &row;
        n[c] += 1;
    }
    for (mut m, &c) in means.rows_mut().into_iter().zip(&n) {
        if c > 0 {
            m /= c as f64;
        }
    }
    let mut correct = 0usize;
    for (row, &c) in f.rows().into_iter().zip(cameras) {
        let mut best = (f64::INFINITY, 0);
        for cam in (0..k).filter(|&c| n[c] > 0) {
            let d: f64 = row
                .iter()
                .zip(means.row(cam))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, cam);
            }
        }
        correct += usize::from(best.1 == c);
    }
    Ok(correct as f64 / cameras.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    /// Share of total variance captured by each kept component.
    pub explained_variance_ratio: Vec<f64>,
    /// Component loadings, one per row.
    pub components: Array2<f64>,
}

/// Mean-centred PCA onto the leading `dims` components. Each component's
/// largest-magnitude loading is made positive.
pub fn pca_projection(
    features: &Array2<f64>,
    labels: &[usize],
    dims: usize,
) -> Result<PcaProjection> {
    let (n, d) = features.dim();
    if n <= dims || dims == 0 || dims > d {
        return Err(Error::invalid(format!(
            "PCA to {dims} dims needs N > dims and dims <= d, got N={n}, d={d}"
        )));
    }
    if labels.len() != n {
        return Err(Error::invalid("label count does not match features"));
    }
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let centered = features - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Array2::zeros((dims, d));
    let mut ratios = Vec::with_capacity(dims);
    for (r, &k) in order.iter().take(dims).enumerate() {
        let col = eig.eigenvectors.column(k);
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .expect("d > 0");
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[r, j]] = sign * col[j];
        }
        ratios.push(if total > 0.0 {
            eig.eigenvalues[k].max(0.0) / total
        } else {
            0.0
        });
    }
    let points = if total > 0.0 {
        centered.dot(&components.t())
    } else {
        Array2::zeros((n, dims))
    };
    Ok(PcaProjection {
        points,
        labels: labels.to_vec(),
        explained_variance_ratio: ratios,
        components,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub epoch: usize,
    pub mutual_information_nats: f64,
    pub lost_ids: usize,
    pub cluster_count: usize,
    pub camera_accuracy_probe: f64,
}

/// Epoch-indexed diagnostics; epochs strictly increase and values are finite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSeries {
    records: Vec<DiagnosticRecord>,
}

impl DiagnosticSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: DiagnosticRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::invalid(format!(
                    "diagnostic epoch {} after {}",
                    record.epoch, last.epoch
                )));
            }
        }
        if !record.mutual_information_nats.is_finite() || !record.camera_accuracy_probe.is_finite()
        {
            return Err(Error::invalid("non-finite diagnostic value"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[DiagnosticRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&DiagnosticRecord> {
        self.records.last()
    }

    pub fn first(&self) -> Option<&DiagnosticRecord> {
        self.records.first()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Branch;
    use ndarray::array;

    fn set<'a>(
        f: &'a Array2<f64>,
        ids: &'a [u32],
        cams: &'a [usize],
        d: &'a [bool],
    ) -> RetrievalSet<'a> {
        RetrievalSet {
            features: f,
            ids,
            cameras: cams,
            distractor: d,
        }
    }

    #[test]
    fn copies_on_other_cameras_score_perfectly() {
        let q = array![[1.0, 0.0, 0.2], [0.0, 1.0, 0.1], [0.3, 0.3, 1.0]];
        let r = score_retrieval(
            set(&q, &[1, 2, 3], &[0, 0, 0], &[false; 3]),
            set(&q, &[1, 2, 3], &[1, 1, 1], &[false; 3]),
        )
        .unwrap();
        assert_eq!((r.rank1, r.map), (1.0, 1.0));
    }

    #[test]
    fn match_ranked_second() {
        let q = array![[1.0, 0.0]];
        let g = array![[1.0, 0.1], [1.0, 0.5], [0.0, 1.0], [1.0, 0.0]];
        // last gallery item shares the query camera and is dropped
        let r = score_retrieval(
            set(&q, &[7], &[0], &[false]),
            set(&g, &[3, 7, 4, 7], &[1, 2, 1, 0], &[false; 4]),
        )
        .unwrap();
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.per_query_ap, vec![0.5]);
    }

    #[test]
    fn same_camera_only_match_excludes_query() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let r = score_retrieval(
            set(&q, &[1, 2], &[0, 0], &[false; 2]),
            set(&g, &[1, 2], &[0, 1], &[false; 2]),
        )
        .unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.per_query_ap.len(), 1);
    }

    #[test]
    fn distractors_never_match() {
        let q = array![[1.0, 0.0]];
        let g = array![[1.0, 0.0], [0.5, 0.5]];
        let r = score_retrieval(
            set(&q, &[0], &[0], &[false]),
            set(&g, &[0, 0], &[1, 1], &[true, false]),
        )
        .unwrap();
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn mi_basic_cases() {
        let a = [0, 1, 0, 1, 1, 0];
        assert!((mutual_information(&a, &a).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(mutual_information(&a, &[3; 6]).unwrap(), 0.0);
        assert_eq!(mutual_information(&a, &a).unwrap(), entropy(&a).unwrap());
        assert!(mutual_information::<u8, u8>(&[], &[]).is_err());
        let masked = mutual_information_masked(&[Some(0), None, Some(1)], &[0, 5, 1]).unwrap();
        assert!((masked - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn jsd_cases() {
        let p = vec![0.2, 0.3, 0.5];
        assert_eq!(jsd_multi(&[p.clone(), p.clone(), p]).unwrap(), 0.0);
        let d = jsd_multi(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-15);
        assert!(jsd_multi(&[vec![1.0], vec![0.5, 0.5]]).is_err());
        assert!(jsd_multi(&[vec![0.7, 0.7]]).is_err());
    }

    #[test]
    fn quality_extremes() {
        let x = Array2::zeros((4, 1));
        let ids = DiagnosticIds::new(vec![Some(1), Some(1), Some(2), Some(2)]);
        let exact = PseudoLabeling::from_assignments(
            &x,
            vec![Some(0), Some(0), Some(1), Some(1)],
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        assert_eq!(
            cluster_quality(&exact, &ids).unwrap(),
            ClusterQuality {
                purity: 1.0,
                nmi: 1.0
            }
        );
        let one =
            PseudoLabeling::from_assignments(&x, vec![Some(0); 4], 0, Branch::Full, false).unwrap();
        let q = cluster_quality(&one, &ids).unwrap();
        assert_eq!((q.purity, q.nmi), (0.5, 0.0));
        let none =
            PseudoLabeling::from_assignments(&x, vec![None; 4], 0, Branch::Full, false).unwrap();
        assert!(cluster_quality(&none, &ids).is_err());
    }

    #[test]
    fn pca_line_and_translation() {
        let dir = array![1.0, -2.0, 0.5];
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i as f64 - 3.0) * dir[j]);
        let p = pca_projection(&x, &[0; 10], 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.components[[0, 1]] > 0.0);
        let shifted = &x + &array![5.0, 5.0, -1.0];
        let q = pca_projection(&shifted, &[0; 10], 2).unwrap();
        assert!((&p.points - &q.points).iter().all(|v| v.abs() < 1e-9));
        let flat = pca_projection(&Array2::from_elem((5, 3), 2.0), &[0; 5], 2).unwrap();
        assert!(flat.points.iter().all(|&v| v == 0.0));
        assert!(pca_projection(&x.slice(ndarray::s![..2, ..]).to_owned(), &[0; 2], 2).is_err());
    }

    #[test]
    fn camera_probe_separable() {
        let f = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        assert_eq!(camera_probe_accuracy(&f, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn series_rejects_non_monotone_epochs() {
        let rec = |e| DiagnosticRecord {
            epoch: e,
            mutual_information_nats: 0.1,
            lost_ids: 0,
            cluster_count: 3,
            camera_accuracy_probe: 0.5,
        };
        let mut s = DiagnosticSeries::new();
        s.push(rec(0)).unwrap();
        s.push(rec(1)).unwrap();
        assert!(s.push(rec(1)).is_err());
        let mut bad = rec(2);
        bad.mutual_information_nats = f64::NAN;
        assert!(s.push(bad).is_err());
    }
}
