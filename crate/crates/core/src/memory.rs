//! Centroid memory: per-layer cluster centroids, initialized from a fresh clustering at the
//! start of every epoch and moved by a momentum rule after each optimizer step.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::cluster::{CentroidSet, NOISE};
use crate::embedding::{EmbeddingBatch, LayerSet};
use crate::error::{Error, Result};
use crate::scalar::{normalize_in_place, Scalar};

/// Which batch samples move a centroid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Every sample of the cluster, sequentially in batch order.
    #[default]
    Sequential,
    /// Only the sample least similar to the current centroid (per layer).
    Hardest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank<T> {
    pub layers: LayerSet,
    /// `m x d` per layer, rows unit length.
    pub per_layer: Vec<Array2<T>>,
    pub momentum: T,
    pub epoch: usize,
}

fn check_momentum<T: Scalar>(alpha: T) -> Result<()> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Config(format!("momentum {alpha} outside [0, 1]")));
    }
    Ok(())
}

impl<T: Scalar> CentroidBank<T> {
    /// Copies the centroids into a new bank.
    pub fn init_from(centroids: &CentroidSet<T>, momentum: T, epoch: usize) -> Result<Self> {
        check_momentum(momentum)?;
        if centroids.is_empty() {
            return Err(Error::Initialization(
                "no clusters to initialize the memory from".into(),
            ));
        }
        Ok(Self {
            layers: centroids.layers.clone(),
            per_layer: centroids.per_layer.clone(),
            momentum,
            epoch,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.per_layer[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.per_layer[0].ncols()
    }

    /// Total stored rows across layers.
    pub fn num_rows(&self) -> usize {
        self.per_layer.iter().map(Array2::nrows).sum()
    }

    /// Centroid matrix of stage `k`.
    pub fn layer(&self, k: usize) -> Option<&Array2<T>> {
        self.layers.position(k).map(|p| &self.per_layer[p])
    }

    /// `row <- alpha * row + (1 - alpha) * z`, then renormalized. `cluster` is the 1-based
    /// pseudo-label.
    pub fn momentum_update(&mut self, layer: usize, cluster: i32, z: ArrayView1<'_, T>) -> Result<()> {
        let m = self.num_clusters();
        if cluster == NOISE || cluster < 1 || cluster as usize > m {
            return Err(Error::Contract(format!(
                "momentum update for cluster {cluster} outside 1..={m}"
            )));
        }
        let p = self.layers.position(layer).ok_or_else(|| {
            Error::Contract(format!("layer {layer} not stored in the memory ({})", self.layers))
        })?;
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "update vector of length {} for dimension {}",
                z.len(),
                self.dim()
            )));
        }
        let alpha = self.momentum;
        let mut row = self.per_layer[p].row_mut(cluster as usize - 1);
        row.zip_mut_with(&z, |c, &x| *c = alpha * *c + (T::one() - alpha) * x);
        normalize_in_place(row.as_slice_mut().expect("contiguous row"));
        Ok(())
    }

    /// Applies a batch's updates on every stored layer. `labels[i]` is the pseudo-label of
    /// batch sample `i`.
    pub fn update_batch(
        &mut self,
        batch: &EmbeddingBatch<T>,
        labels: &[i32],
        rule: UpdateRule,
    ) -> Result<()> {
        if labels.len() != batch.len() {
            return Err(Error::Shape("one pseudo-label per batch sample required".into()));
        }
        for &k in self.layers.clone().layers() {
            let emb = batch.layer(k).ok_or_else(|| {
                Error::Contract(format!("batch lacks layer {k} held by the memory"))
            })?;
            match rule {
                UpdateRule::Sequential => {
                    for (i, &l) in labels.iter().enumerate() {
                        self.momentum_update(k, l, emb.row(i))?;
                    }
                }
                UpdateRule::Hardest => {
                    let mut seen: Vec<i32> = Vec::new();
                    for &l in labels {
                        if seen.contains(&l) {
                            continue;
                        }
                        seen.push(l);
                        if l < 1 || l as usize > self.num_clusters() {
                            return Err(Error::Contract(format!("cluster {l} outside memory")));
                        }
                        let centre = self.layer(k).expect("stored layer").row(l as usize - 1).to_owned();
                        let hardest = labels
                            .iter()
                            .enumerate()
                            .filter(|(_, &x)| x == l)
                            .map(|(i, _)| (i, emb.row(i).dot(&centre)))
                            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                            .map(|(i, _)| i)
                            .expect("at least one member");
                        self.momentum_update(k, l, emb.row(hardest))?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn bank(rows: Array2<f64>, alpha: f64) -> CentroidBank<f64> {
        let set = CentroidSet {
            layers: LayerSet::final_only(),
            per_layer: vec![rows],
        };
        CentroidBank::init_from(&set, alpha, 0).unwrap()
    }

    #[test]
    fn init_copies_rows_exactly() {
        let set = CentroidSet {
            layers: LayerSet::all(),
            per_layer: (0..4)
                .map(|k| Array2::from_shape_fn((3, 5), |(i, j)| (i + j * k) as f64 * 0.37))
                .collect(),
        };
        let b = CentroidBank::init_from(&set, 0.1, 7).unwrap();
        assert_eq!(b.per_layer, set.per_layer);
        assert_eq!(b.num_rows(), 12);
        assert_eq!(b.epoch, 7);
    }

    #[test]
    fn init_rejects_bad_momentum_and_empty_sets() {
        let set = CentroidSet {
            layers: LayerSet::final_only(),
            per_layer: vec![array![[1.0, 0.0]]],
        };
        assert!(matches!(CentroidBank::init_from(&set, 1.5, 0), Err(Error::Config(_))));
        assert!(matches!(CentroidBank::init_from(&set, -0.1, 0), Err(Error::Config(_))));
        let empty = CentroidSet {
            layers: LayerSet::final_only(),
            per_layer: vec![Array2::<f64>::zeros((0, 2))],
        };
        assert!(matches!(
            CentroidBank::init_from(&empty, 0.1, 0),
            Err(Error::Initialization(_))
        ));
    }

    #[test]
    fn momentum_update_arithmetic() {
        let mut b = bank(array![[1.0, 0.0], [0.0, 1.0]], 0.1);
        b.momentum_update(4, 1, array![0.0, 1.0].view()).unwrap();
        let n = (0.1f64 * 0.1 + 0.9 * 0.9).sqrt();
        assert_eq!(b.per_layer[0].row(0).to_vec(), vec![0.1 / n, 0.9 / n]);
        assert_eq!(b.per_layer[0].row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_momenta() {
        let z: Array1<f64> = array![0.6, 0.8];
        let mut keep = bank(array![[1.0, 0.0]], 1.0);
        keep.momentum_update(4, 1, z.view()).unwrap();
        assert_eq!(keep.per_layer[0].row(0).to_vec(), vec![1.0, 0.0]);
        let mut replace = bank(array![[1.0, 0.0]], 0.0);
        replace.momentum_update(4, 1, z.view()).unwrap();
        let n = (0.6f64 * 0.6 + 0.8 * 0.8).sqrt();
        assert_eq!(replace.per_layer[0].row(0).to_vec(), vec![0.6 / n, 0.8 / n]);
    }

    #[test]
    fn noise_never_reaches_memory() {
        let mut b = bank(array![[1.0, 0.0]], 0.1);
        assert!(matches!(
            b.momentum_update(4, NOISE, array![0.0, 1.0].view()),
            Err(Error::Contract(_))
        ));
        assert!(b.momentum_update(4, 2, array![0.0, 1.0].view()).is_err());
        assert!(b.momentum_update(3, 1, array![0.0, 1.0].view()).is_err());
    }

    #[test]
    fn hardest_rule_uses_least_similar_member() {
        let mut b = bank(array![[1.0, 0.0]], 0.0);
        let batch = EmbeddingBatch {
            layers: LayerSet::final_only(),
            per_layer: vec![array![[0.8, 0.6], [0.0, 1.0], [1.0, 0.0]]],
        };
        b.update_batch(&batch, &[1, 1, 1], UpdateRule::Hardest).unwrap();
        assert_eq!(b.per_layer[0].row(0).to_vec(), vec![0.0, 1.0]);
    }
}
