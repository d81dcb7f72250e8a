//! Multi-layer centroid InfoNCE.
//!
//! For a sample with per-stage unit vectors `z_k` and positive cluster `p`, the summed-logit
//! form is
//!
//! ```text
//! s_j  = sum_k <z_k, c_{j,k}> / tau
//! loss = -log( exp(s_p) / sum_j exp(s_j) )
//! ```
//!
//! evaluated as `logsumexp(s) - s_p` with the maximum logit subtracted first. With one stage
//! it is the classic single-layer centroid InfoNCE.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::NOISE;
use crate::embedding::{EmbeddingBatch, LayerSet, MultiLayerEmbedding};
use crate::error::{Error, Result};
use crate::memory::CentroidBank;
use crate::scalar::{normalize_in_place, Scalar};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Inner products summed over stages inside one softmax.
    #[default]
    SummedLogits,
    /// One softmax per stage, losses averaged.
    AveragedPerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub layers: LayerSet,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            layers: LayerSet::all(),
            variant: LossVariant::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn check_inputs<T: Scalar>(
    sample: &MultiLayerEmbedding<T>,
    positive: i32,
    bank: &CentroidBank<T>,
    config: &LossConfig,
) -> Result<usize> {
    config.validate()?;
    let m = bank.num_clusters();
    if m == 0 {
        return Err(Error::Contract("loss evaluated against an empty memory".into()));
    }
    if positive == NOISE || positive < 1 || positive as usize > m {
        return Err(Error::Contract(format!(
            "positive cluster {positive} outside 1..={m}"
        )));
    }
    if !config.layers.is_subset_of(&bank.layers) || !config.layers.is_subset_of(&sample.layers) {
        return Err(Error::Contract(format!(
            "loss layers {} not held by sample ({}) and memory ({})",
            config.layers, sample.layers, bank.layers
        )));
    }
    if sample.dim() != bank.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension {} vs memory dimension {}",
            sample.dim(),
            bank.dim()
        )));
    }
    Ok(positive as usize - 1)
}

/// `<z_k, c_{j,k}> / tau` for every cluster `j`.
fn layer_logits<T: Scalar>(z: &Array1<T>, centroids: &Array2<T>, inv_tau: T) -> Array1<T> {
    centroids.dot(z) * inv_tau
}

/// Softmax probabilities and `logsumexp(logits) - logits[positive]`.
fn cross_entropy<T: Scalar>(logits: &Array1<T>, positive: usize) -> (T, Array1<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps = logits.mapv(|l| (l - max).exp());
    let total: T = exps.sum();
    let loss = (max + total.ln()) - logits[positive];
    (loss, exps / total)
}

/// Summed-over-stages logits for one sample; exposed for inspection and tests.
pub fn summed_logits<T: Scalar>(
    sample: &MultiLayerEmbedding<T>,
    bank: &CentroidBank<T>,
    config: &LossConfig,
) -> Array1<T> {
    let inv_tau = T::lit(1.0 / config.temperature);
    let mut acc = Array1::zeros(bank.num_clusters());
    for &k in config.layers.layers() {
        let z = sample.layer(k).expect("validated layer").to_owned();
        acc += &layer_logits(&z, bank.layer(k).expect("validated layer"), inv_tau);
    }
    acc
}

/// Loss value and its gradient with respect to each `z_k` (ordered as `config.layers`).
/// Centroids are constants.
pub fn mlnce_with_grad<T: Scalar>(
    sample: &MultiLayerEmbedding<T>,
    positive: i32,
    bank: &CentroidBank<T>,
    config: &LossConfig,
) -> Result<(T, Vec<Array1<T>>)> {
    let pos = check_inputs(sample, positive, bank, config)?;
    let inv_tau = T::lit(1.0 / config.temperature);
    let grad_for = |probs: &Array1<T>, centroids: &Array2<T>, scale: T| {
        let mut g = centroids.t().dot(probs);
        g -= &centroids.row(pos);
        g * (inv_tau * scale)
    };
    match config.variant {
        LossVariant::SummedLogits => {
            let logits = summed_logits(sample, bank, config);
            let (loss, probs) = cross_entropy(&logits, pos);
            let grads = config
                .layers
                .layers()
                .iter()
                .map(|&k| grad_for(&probs, bank.layer(k).unwrap(), T::one()))
                .collect();
            Ok((loss, grads))
        }
        LossVariant::AveragedPerLayer => {
            let scale = T::one() / T::from_usize_lossy(config.layers.len());
            let mut total = T::zero();
            let mut grads = Vec::with_capacity(config.layers.len());
            for &k in config.layers.layers() {
                let z = sample.layer(k).unwrap().to_owned();
                let c = bank.layer(k).unwrap();
                let (loss, probs) = cross_entropy(&layer_logits(&z, c, inv_tau), pos);
                total = total + loss * scale;
                grads.push(grad_for(&probs, c, scale));
            }
            Ok((total, grads))
        }
    }
}

/// Loss for a single sample against the memory.
pub fn mlnce<T: Scalar>(
    sample: &MultiLayerEmbedding<T>,
    positive: i32,
    bank: &CentroidBank<T>,
    config: &LossConfig,
) -> Result<T> {
    mlnce_with_grad(sample, positive, bank, config).map(|(l, _)| l)
}

/// Mean loss over the non-noise samples of a batch, with gradients laid out like the batch
/// restricted to `config.layers` (noise rows get zero gradient).
pub fn batch_mlnce<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    labels: &[i32],
    bank: &CentroidBank<T>,
    config: &LossConfig,
) -> Result<(T, EmbeddingBatch<T>)> {
    if labels.len() != batch.len() {
        return Err(Error::Shape("one pseudo-label per batch sample required".into()));
    }
    let counted: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != NOISE).collect();
    let mut grads: Vec<Array2<T>> = config
        .layers
        .layers()
        .iter()
        .map(|_| Array2::zeros((batch.len(), batch.dim())))
        .collect();
    if counted.is_empty() {
        return Err(Error::Contract("batch contains only noise samples".into()));
    }
    let scale = T::one() / T::from_usize_lossy(counted.len());
    let mut total = T::zero();
    for &i in &counted {
        let (loss, g) = mlnce_with_grad(&batch.sample(i), labels[i], bank, config)?;
        total = total + loss;
        for (dst, src) in grads.iter_mut().zip(g) {
            dst.row_mut(i).assign(&(src * scale));
        }
    }
    Ok((
        total * scale,
        EmbeddingBatch {
            layers: config.layers.clone(),
            per_layer: grads,
        },
    ))
}

/// Random loss instance for gradient checks: unit sample vectors, unit centroids.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub sample: MultiLayerEmbedding<f64>,
    pub positive: i32,
    pub bank: CentroidBank<f64>,
    pub config: LossConfig,
}

impl LossInstance {
    pub fn random(seed: u64, clusters: usize, layers: LayerSet, dim: usize, temperature: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize_in_place(&mut v);
            Array1::from(v)
        };
        let vectors = layers.layers().iter().map(|_| unit(&mut rng)).collect();
        let per_layer = layers
            .layers()
            .iter()
            .map(|_| {
                let rows: Vec<Array1<f64>> = (0..clusters).map(|_| unit(&mut rng)).collect();
                let mut m = Array2::zeros((clusters, dim));
                for (j, r) in rows.iter().enumerate() {
                    m.row_mut(j).assign(r);
                }
                m
            })
            .collect();
        let positive = rng.random_range(1..=clusters as i32);
        Self {
            sample: MultiLayerEmbedding {
                layers: layers.clone(),
                vectors,
            },
            positive,
            bank: CentroidBank {
                layers: layers.clone(),
                per_layer,
                momentum: 0.1,
                epoch: 0,
            },
            config: LossConfig {
                temperature,
                layers,
                variant: LossVariant::SummedLogits,
            },
        }
    }
}

/// Maximum relative error between the analytic gradient and central finite differences with
/// step `h`. Components are compared as `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn mlnce_gradient_check(instance: &LossInstance, h: f64) -> Result<f64> {
    let (_, analytic) =
        mlnce_with_grad(&instance.sample, instance.positive, &instance.bank, &instance.config)?;
    let mut worst = 0.0f64;
    for (p, &k) in instance.config.layers.layers().iter().enumerate() {
        let pos = instance.sample.layers.position(k).unwrap();
        for c in 0..instance.sample.dim() {
            let eval = |delta: f64| {
                let mut s = instance.sample.clone();
                s.vectors[pos][c] += delta;
                mlnce(&s, instance.positive, &instance.bank, &instance.config)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic[p][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
