//! Pseudo-labeling: k-reciprocal Jaccard distances, DBSCAN on the precomputed matrix, and
//! per-layer cluster centroids.
//!
//! # k-reciprocal Jaccard distance
//!
//! For unit vectors `z_i` let `d(i, j) = 2 - 2 <z_i, z_j>` and let `rank_i` list samples by
//! increasing `d(i, .)` (ties by index, `i` itself first). With `top(i, k)` the first `k + 1`
//! entries of `rank_i`:
//!
//! 1. `R(i, k) = { j in top(i, k) : i in top(j, k) }` (k-reciprocal neighbours).
//! 2. `R*(i)` is `R(i, k1)` extended by `R(c, h)` for every candidate `c` in `R(i, k1)` with
//!    `|R(c, h) ∩ R(i, k1)| > 2/3 |R(c, h)|`, where `h = round_half_even(k1 / 2)`.
//! 3. `V[i, j] = softmax_{j in R*(i)}(-d(i, j))`, zero outside `R*(i)`.
//! 4. Local query expansion (when `k2 > 1`): `V[i] <- mean of V[j] over the first k2 entries
//!    of rank_i`.
//! 5. `J(i, j) = 1 - s / (2 - s)` with `s = sum_l min(V[i, l], V[j, l])`, clamped to `[0, 1]`
//!    with a zero diagonal.
//!
//! Optionally the result is mixed with the original distance normalized by its global
//! maximum: `(1 - lambda) J + lambda d / max d`.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBatch, LayerSet};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Pseudo-label of an unclustered sample.
pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Maximum neighbour distance.
    pub eps: f64,
    pub k1: usize,
    pub k2: usize,
    /// Core-point threshold, the point itself included.
    pub min_samples: usize,
    /// Weight of the original distance in the final matrix; 0 means pure Jaccard.
    pub lambda: f64,
    /// Cluster on the concatenation of all contrastive layers instead of the final one.
    pub fuse_layers: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 0.4,
            k1: 30,
            k2: 6,
            min_samples: 4,
            lambda: 0.0,
            fuse_layers: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Config(format!("eps {} outside (0, 1]", self.eps)));
        }
        if self.k2 < 1 || self.k1 <= self.k2 {
            return Err(Error::Config(format!(
                "need k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if self.min_samples < 1 {
            return Err(Error::Config("min_samples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Result of density clustering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Per-sample label: [`NOISE`] or a cluster id in `1..=m`.
    pub labels: Vec<i32>,
    /// Member indices of each cluster; `members[j - 1]` is cluster `j`.
    pub members: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds the member lists from labels, validating the label range.
    pub fn from_labels(labels: Vec<i32>) -> Result<Self> {
        let m = labels.iter().copied().max().unwrap_or(0).max(0) as usize;
        let mut members = vec![Vec::new(); m];
        for (i, &l) in labels.iter().enumerate() {
            match l {
                NOISE => {}
                l if l >= 1 => members[l as usize - 1].push(i),
                _ => return Err(Error::Contract(format!("invalid pseudo-label {l}"))),
            }
        }
        if let Some(j) = members.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("cluster {} has no members", j + 1)));
        }
        Ok(Self { labels, members })
    }

    /// Number of clusters `m`.
    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    /// Number of clustered (non-noise) samples `N_C`.
    pub fn num_clustered(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 0-based cluster index of sample `i`, `None` for noise.
    pub fn cluster_index(&self, i: usize) -> Option<usize> {
        match self.labels[i] {
            NOISE => None,
            l => Some(l as usize - 1),
        }
    }
}

/// Pairwise `2 - 2 <z_i, z_j>` distances with an exact zero diagonal.
pub fn squared_euclidean_unit<T: Scalar>(emb: ArrayView2<'_, T>) -> Array2<T> {
    let n = emb.nrows();
    let rows: Vec<Vec<T>> = emb.outer_iter().map(|r| r.to_vec()).collect();
    let two = T::lit(2.0);
    let mut out = Array2::zeros((n, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                row[j] = if i == j {
                    T::zero()
                } else {
                    two - two * dot(&rows[i], &rows[j])
                };
            }
        });
    out
}

/// Indices of the `count` nearest samples to each row (self included, ties by index).
fn initial_ranks<T: Scalar>(dist: &Array2<T>, count: usize) -> Vec<Vec<usize>> {
    (0..dist.nrows())
        .into_par_iter()
        .map(|i| {
            let row = dist.row(i);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            let key = |j: usize| (if j == i { T::neg_infinity() } else { row[j] }, j);
            idx.select_nth_unstable_by(count - 1, |&a, &b| {
                key(a).partial_cmp(&key(b)).expect("finite distances")
            });
            idx.truncate(count);
            idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("finite distances"));
            idx
        })
        .collect()
}

fn k_reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ranks[i][..=k]
        .iter()
        .copied()
        .filter(|&j| ranks[j][..=k].contains(&i))
        .collect();
    out.sort_unstable();
    out
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// k-reciprocal Jaccard distance matrix over unit-normalized rows of `emb`; see the module docs
/// for the exact construction.
pub fn jaccard_distance_matrix<T: Scalar>(
    emb: ArrayView2<'_, T>,
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Result<Array2<T>> {
    let n = emb.nrows();
    if n <= k1 {
        return Err(Error::Config(format!(
            "k1 = {k1} requires more than {k1} samples, got {n}; lower k1"
        )));
    }
    if k2 < 1 || k2 > k1 + 1 {
        return Err(Error::Config(format!("k2 = {k2} must lie in 1..={}", k1 + 1)));
    }
    let dist = squared_euclidean_unit(emb);
    let ranks = initial_ranks(&dist, k1 + 1);
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let nn_k1: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| k_reciprocal(&ranks, i, k1)).collect();
    let nn_half: Vec<Vec<usize>> =
        (0..n).into_par_iter().map(|i| k_reciprocal(&ranks, i, half)).collect();

    // Sparse rows of V as (column, weight), sorted by column.
    let v_rows: Vec<Vec<(usize, T)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = &nn_k1[i];
            let mut expanded = base.clone();
            for &c in base {
                let cand = &nn_half[c];
                if 3 * sorted_intersection_len(cand, base) > 2 * cand.len() {
                    expanded.extend_from_slice(cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            let logits: Vec<T> = expanded.iter().map(|&j| -dist[[i, j]]).collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            expanded
                .into_iter()
                .zip(exps)
                .map(|(j, e)| (j, e / total))
                .collect()
        })
        .collect();

    let v_rows = if k2 != 1 {
        let scale = T::one() / T::from_usize_lossy(k2);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![T::zero(); n];
                for &q in &ranks[i][..k2] {
                    for &(j, w) in &v_rows[q] {
                        acc[j] = acc[j] + w;
                    }
                }
                acc.into_iter()
                    .enumerate()
                    .filter(|(_, w)| *w != T::zero())
                    .map(|(j, w)| (j, w * scale))
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        v_rows
    };

    // Inverted index: column l -> rows with nonzero V[., l].
    let mut inverted: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
    for (i, row) in v_rows.iter().enumerate() {
        for &(l, w) in row {
            inverted[l].push((i, w));
        }
    }

    let two = T::lit(2.0);
    let max_dist = if lambda > 0.0 {
        dist.iter().copied().fold(T::zero(), T::max)
    } else {
        T::one()
    };
    let lam = T::lit(lambda);
    let mut out = Array2::zeros((n, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let mut shared = vec![T::zero(); n];
            for &(l, w_il) in &v_rows[i] {
                for &(j, w_jl) in &inverted[l] {
                    shared[j] = shared[j] + w_il.min(w_jl);
                }
            }
            for j in 0..n {
                let jac = if i == j {
                    T::zero()
                } else {
                    let s = shared[j];
                    (T::one() - s / (two - s)).max(T::zero()).min(T::one())
                };
                row[j] = if lambda > 0.0 && i != j {
                    let orig = if max_dist > T::zero() { dist[[i, j]] / max_dist } else { T::zero() };
                    (T::one() - lam) * jac + lam * orig.max(T::zero())
                } else {
                    jac
                };
            }
        });
    Ok(out)
}

/// DBSCAN on a precomputed distance matrix.
///
/// A point is core when at least `min_samples` points (itself included) lie within `eps`.
/// Clusters grow from core points in index order; a border point joins the first cluster that
/// reaches it. Cluster ids are finally renumbered `1..=m` by first member index.
pub fn dbscan<T: Scalar>(dist: ArrayView2<'_, T>, eps: T, min_samples: usize) -> ClusterAssignment {
    let n = dist.nrows();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist[[i, j]] <= eps).collect())
        .collect();
    let is_core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut raw: Vec<Option<usize>> = vec![None; n];
    let mut next = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if raw[start].is_some() || !is_core[start] {
            continue;
        }
        let c = next;
        next += 1;
        raw[start] = Some(c);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            if !is_core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if raw[q].is_none() {
                    raw[q] = Some(c);
                    queue.push_back(q);
                }
            }
        }
    }

    // Renumber by first member index.
    let mut remap: Vec<Option<i32>> = vec![None; next];
    let mut m = 0i32;
    let labels: Vec<i32> = raw
        .iter()
        .map(|r| match r {
            None => NOISE,
            Some(c) => *remap[*c].get_or_insert_with(|| {
                m += 1;
                m
            }),
        })
        .collect();
    ClusterAssignment::from_labels(labels).expect("dbscan labels are dense")
}

/// Features the clustering runs on: the final layer, or the concatenation of every layer
/// scaled so the fused vector keeps unit norm.
pub fn clustering_features<T: Scalar>(batch: &EmbeddingBatch<T>, fuse_layers: bool) -> Array2<T> {
    if !fuse_layers || batch.layers.len() == 1 {
        return batch.final_layer().to_owned();
    }
    let views: Vec<ArrayView2<'_, T>> = batch.per_layer.iter().map(|m| m.view()).collect();
    let scale = T::one() / T::from_usize_lossy(views.len()).sqrt();
    ndarray::concatenate(Axis(1), &views).expect("equal row counts") * scale
}

/// Full pseudo-labeling step: features, Jaccard matrix, DBSCAN.
pub fn pseudo_label<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    config: &ClusterConfig,
) -> Result<ClusterAssignment> {
    config.validate()?;
    let features = clustering_features(batch, config.fuse_layers);
    let dist = jaccard_distance_matrix(features.view(), config.k1, config.k2, config.lambda)?;
    Ok(dbscan(dist.view(), T::lit(config.eps), config.min_samples))
}

/// Per-layer cluster centroids, `m x d` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet<T> {
    pub layers: LayerSet,
    pub per_layer: Vec<Array2<T>>,
}

impl<T: Scalar> CentroidSet<T> {
    pub fn num_clusters(&self) -> usize {
        self.per_layer.first().map_or(0, Array2::nrows)
    }

    pub fn is_empty(&self) -> bool {
        self.num_clusters() == 0
    }
}

/// Arithmetic means of member vectors per cluster and layer, noise excluded.
pub fn cluster_means<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    assignment: &ClusterAssignment,
) -> Result<CentroidSet<T>> {
    if assignment.len() != batch.len() {
        return Err(Error::Shape(format!(
            "assignment covers {} samples, embeddings {}",
            assignment.len(),
            batch.len()
        )));
    }
    let m = assignment.num_clusters();
    let per_layer = batch
        .per_layer
        .iter()
        .map(|emb| {
            let mut out = Array2::zeros((m, emb.ncols()));
            for (j, members) in assignment.members.iter().enumerate() {
                let mut row = out.row_mut(j);
                for &i in members {
                    row += &emb.row(i);
                }
                row /= T::from_usize_lossy(members.len());
            }
            out
        })
        .collect();
    Ok(CentroidSet {
        layers: batch.layers.clone(),
        per_layer,
    })
}

/// Cluster centroids: means renormalized to unit length.
pub fn centroids<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    assignment: &ClusterAssignment,
) -> Result<CentroidSet<T>> {
    let mut set = cluster_means(batch, assignment)?;
    for m in &mut set.per_layer {
        for mut row in m.axis_iter_mut(Axis(0)) {
            crate::scalar::normalize_in_place(row.as_slice_mut().expect("contiguous row"));
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_rows(m: Array2<f64>) -> Array2<f64> {
        let mut m = m;
        for mut r in m.axis_iter_mut(Axis(0)) {
            crate::scalar::normalize_in_place(r.as_slice_mut().unwrap());
        }
        m
    }

    #[test]
    fn identical_embeddings_have_zero_distance() {
        let mut m = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.1 * i as f64);
        let r = m.row(2).to_owned();
        m.row_mut(6).assign(&r);
        let m = unit_rows(m);
        let d = jaccard_distance_matrix(m.view(), 4, 2, 0.0).unwrap();
        assert!(d[[2, 6]].abs() < 1e-12, "{}", d[[2, 6]]);
        assert!(d[[6, 2]].abs() < 1e-12);
    }

    #[test]
    fn orthogonal_groups_are_at_distance_one() {
        let m = Array2::from_shape_fn((12, 2), |(i, j)| if (i < 6) == (j == 0) { 1.0f64 } else { 0.0 });
        let d = jaccard_distance_matrix(m.view(), 5, 2, 0.0).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let want = if (i < 6) == (j < 6) { 0.0 } else { 1.0 };
                assert!((d[[i, j]] - want).abs() < 1e-12, "d[{i},{j}] = {}", d[[i, j]]);
            }
        }
        let a = dbscan(d.view(), 0.4, 4);
        assert_eq!(a.labels, [vec![1; 6], vec![2; 6]].concat());
    }

    #[test]
    fn too_few_samples_for_k1() {
        let m = unit_rows(Array2::from_elem((5, 3), 1.0));
        assert!(matches!(
            jaccard_distance_matrix(m.view(), 5, 2, 0.0),
            Err(Error::Config(msg)) if msg.contains("lower k1")
        ));
    }

    #[test]
    fn dbscan_two_groups() {
        let n = 6;
        let d = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else if (i < 3) == (j < 3) {
                0.1
            } else {
                0.9
            }
        });
        let a = dbscan(d.view(), 0.4, 2);
        assert_eq!(a.labels, vec![1, 1, 1, 2, 2, 2]);
        assert_eq!(a.num_clusters(), 2);
        assert_eq!(a.num_clustered(), 6);
    }

    #[test]
    fn dbscan_all_noise() {
        let d = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 0.0 } else { 0.9 });
        let a = dbscan(d.view(), 0.4, 2);
        assert_eq!(a.labels, vec![NOISE; 5]);
        assert_eq!(a.num_clusters(), 0);
    }

    #[test]
    fn dbscan_relabels_by_first_member() {
        // point 0 is a border point of the cluster grown from core point 3
        let d = array![
            [0.0, 0.9, 0.9, 0.3, 0.9],
            [0.9, 0.0, 0.1, 0.9, 0.9],
            [0.9, 0.1, 0.0, 0.9, 0.9],
            [0.3, 0.9, 0.9, 0.0, 0.2],
            [0.9, 0.9, 0.9, 0.2, 0.0],
        ];
        let a = dbscan(d.view(), 0.4, 2);
        assert_eq!(a.labels, vec![1, 2, 2, 1, 1]);
    }

    #[test]
    fn centroid_examples() {
        let batch = EmbeddingBatch {
            layers: LayerSet::final_only(),
            per_layer: vec![array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]],
        };
        let a = ClusterAssignment::from_labels(vec![1, 1, 2]).unwrap();
        let c = centroids(&batch, &a).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c.per_layer[0][[0, 0]] - h).abs() < 1e-15);
        assert!((c.per_layer[0][[0, 1]] - h).abs() < 1e-15);
        assert_eq!(c.per_layer[0].row(1).to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn empty_assignment_gives_empty_centroids() {
        let batch = EmbeddingBatch {
            layers: LayerSet::final_only(),
            per_layer: vec![array![[1.0, 0.0], [0.0, 1.0]]],
        };
        let a = ClusterAssignment::from_labels(vec![NOISE, NOISE]).unwrap();
        assert!(centroids(&batch, &a).unwrap().is_empty());
    }

    #[test]
    fn assignment_validation() {
        assert!(ClusterAssignment::from_labels(vec![1, 3]).is_err());
        assert!(ClusterAssignment::from_labels(vec![0]).is_err());
        let a = ClusterAssignment::from_labels(vec![2, -1, 1, 2]).unwrap();
        assert_eq!(a.members, vec![vec![2], vec![0, 3]]);
        assert_eq!(a.cluster_index(1), None);
        assert_eq!(a.cluster_index(3), Some(1));
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::default().validate().is_ok());
        let bad = ClusterConfig { k1: 6, k2: 6, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ClusterConfig { eps: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
