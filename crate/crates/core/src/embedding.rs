//! Multi-layer embedding containers and the encoder layer selection.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of encoder stages that can feed the contrastive objective.
pub const NUM_STAGES: usize = 4;

/// Nonempty sorted subset of the encoder stages `{1, 2, 3, 4}`.
///
/// The final stage is always a member: its vector is the embedding used for clustering and
/// fine-tuning. `{4}` is the single-layer mode, `{1, 2, 3, 4}` the full multi-layer mode.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = layers.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("layer set must not be empty".into()));
        }
        if let Some(&bad) = v.iter().find(|&&k| k == 0 || k > NUM_STAGES) {
            return Err(Error::Config(format!(
                "layer {bad} outside 1..={NUM_STAGES}"
            )));
        }
        if *v.last().unwrap() != NUM_STAGES {
            return Err(Error::Config(format!(
                "layer set must contain the final stage {NUM_STAGES}"
            )));
        }
        Ok(Self(v))
    }

    pub fn all() -> Self {
        Self((1..=NUM_STAGES).collect())
    }

    pub fn final_only() -> Self {
        Self(vec![NUM_STAGES])
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.contains(&k)
    }

    pub fn is_subset_of(&self, other: &LayerSet) -> bool {
        self.0.iter().all(|k| other.contains(*k))
    }

    /// Position of stage `k` within this set.
    pub fn position(&self, k: usize) -> Option<usize> {
        self.0.iter().position(|&x| x == k)
    }
}

impl Default for LayerSet {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl fmt::Debug for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LayerSet({self})")
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("invalid layer '{p}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

impl Serialize for LayerSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // a bare integer is a single layer
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            One(usize),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::One(k) => Self::new(vec![k]).map_err(serde::de::Error::custom),
        }
    }
}

/// One sample's contrastive vectors, one per stage in `layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerEmbedding<T> {
    pub layers: LayerSet,
    pub vectors: Vec<Array1<T>>,
}

impl<T: Scalar> MultiLayerEmbedding<T> {
    pub fn layer(&self, k: usize) -> Option<ArrayView1<'_, T>> {
        self.layers.position(k).map(|p| self.vectors[p].view())
    }

    /// The final-stage embedding.
    pub fn final_vector(&self) -> ArrayView1<'_, T> {
        self.vectors.last().expect("nonempty layer set").view()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

/// Embeddings for a batch of samples, stored per layer as `N x d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub layers: LayerSet,
    pub per_layer: Vec<Array2<T>>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn len(&self) -> usize {
        self.per_layer[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.per_layer[0].ncols()
    }

    pub fn layer(&self, k: usize) -> Option<ArrayView2<'_, T>> {
        self.layers.position(k).map(|p| self.per_layer[p].view())
    }

    pub fn final_layer(&self) -> ArrayView2<'_, T> {
        self.per_layer.last().expect("nonempty layer set").view()
    }

    /// Copy holding only the stages of `layers`.
    pub fn restrict(&self, layers: &LayerSet) -> Result<Self> {
        let per_layer = layers
            .layers()
            .iter()
            .map(|&k| {
                self.layer(k)
                    .map(|v| v.to_owned())
                    .ok_or_else(|| Error::Contract(format!("embeddings lack layer {k} (have {})", self.layers)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers: layers.clone(),
            per_layer,
        })
    }

    pub fn sample(&self, i: usize) -> MultiLayerEmbedding<T> {
        MultiLayerEmbedding {
            layers: self.layers.clone(),
            vectors: self
                .per_layer
                .iter()
                .map(|m| m.index_axis(Axis(0), i).to_owned())
                .collect(),
        }
    }

    /// Stacks single-sample embeddings that share a layer set.
    pub fn from_samples(samples: &[MultiLayerEmbedding<T>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty sample list".into()))?;
        let d = first.dim();
        let mut per_layer = Vec::with_capacity(first.layers.len());
        for p in 0..first.layers.len() {
            let mut m = Array2::zeros((samples.len(), d));
            for (i, s) in samples.iter().enumerate() {
                if s.layers != first.layers || s.vectors[p].len() != d {
                    return Err(Error::Shape("inconsistent sample embeddings".into()));
                }
                m.row_mut(i).assign(&s.vectors[p]);
            }
            per_layer.push(m);
        }
        Ok(Self {
            layers: first.layers.clone(),
            per_layer,
        })
    }
}
