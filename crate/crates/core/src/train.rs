//! Pretraining (re-cluster every epoch, then PK-sampled contrastive steps against the centroid
//! memory), frozen-encoder linear fine-tuning and evaluation.
//!
//! Randomness is derived from `(seed, epoch)` only, so resuming from an epoch boundary needs
//! no generator state. Gradient reductions are ordered, which makes runs reproducible for any
//! thread count; `deterministic` additionally pins the work to one thread.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentSpec};
use crate::checkpoint::Checkpoint;
use crate::cluster::{centroids, pseudo_label, ClusterAssignment, ClusterConfig, CentroidSet};
use crate::data::{Image, LabeledImageSet};
use crate::embedding::LayerSet;
use crate::error::{Error, Result};
use crate::loss::{batch_mlnce, LossConfig};
use crate::memory::{CentroidBank, UpdateRule};
use crate::metrics::{ari_from_contingency, cacc_from_contingency, classification_metrics, Contingency, F1Mode, MetricsReport};
use crate::model::{argmax, Encoder, EncoderConfig, LinearHead};
use crate::nn::{zero_grad, Adam, Sgd};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Momentum SGD (`sgd_momentum`).
    #[default]
    Sgd,
    /// Adam, betas (0.9, 0.999), eps 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations: usize,
    pub batch_size: usize,
    /// Samples drawn per cluster in a batch.
    pub instances: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub sgd_momentum: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Linear-head training after pretraining.
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            iterations: 100,
            batch_size: 16,
            instances: 4,
            learning_rate: 0.35,
            weight_decay: 5e-4,
            optimizer: Optimizer::Sgd,
            sgd_momentum: 0.9,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub momentum: f64,
    pub update_rule: UpdateRule,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            update_rule: UpdateRule::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Optimize in per-feature standardized coordinates (statistics of the fine-tune set) and
    /// fold the scaling back into the head, which stays an affine map of the raw embedding.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tune epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "invalid fine-tune optimizer settings lr={} momentum={} weight_decay={}",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Everything that shapes a pretraining run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub model: EncoderConfig,
    pub cluster: ClusterConfig,
    pub augment: AugmentSpec,
    pub loss: LossConfig,
    pub memory: MemoryConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.iterations == 0 {
            return Err(Error::Config("epochs and iterations must be at least 1".into()));
        }
        if t.instances == 0 || t.batch_size == 0 || t.batch_size % t.instances != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be a positive multiple of instances {}",
                t.batch_size, t.instances
            )));
        }
        if !(t.learning_rate > 0.0) || !(0.0..1.0).contains(&t.sgd_momentum) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={} momentum={} weight_decay={}",
                t.learning_rate, t.sgd_momentum, t.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&t.lr_decay_at) || !(t.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_at must lie in [0, 1] and lr_decay_factor be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.memory.momentum) {
            return Err(Error::Config(format!("memory momentum {} outside [0, 1]", self.memory.momentum)));
        }
        t.finetune.validate()?;
        self.model.validate()?;
        self.cluster.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        if !self.loss.layers.is_subset_of(&self.model.layers) {
            return Err(Error::Config(format!(
                "loss layers {} are not produced by the encoder (layers {})",
                self.loss.layers, self.model.layers
            )));
        }
        Ok(())
    }

    /// Scaled-down settings for 32x32 synthetic corpora of a few hundred images: 5 epochs of 50
    /// iterations, stage widths 16/32/64/128, d = 128, clustering on all layers fused, 4-pixel
    /// padding and learning rate 0.01.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.epochs = 5;
        c.train.iterations = 50;
        c.train.learning_rate = 0.01;
        c.model.stage_widths = [16, 32, 64, 128];
        c.model.embedding_dim = 128;
        c.cluster.fuse_layers = true;
        c.augment.pad_pixels = 4;
        c
    }

    /// Same contrastive layers for encoder and loss.
    pub fn with_layers(mut self, layers: LayerSet) -> Self {
        self.model.layers = layers.clone();
        self.loss.layers = layers;
        self
    }

    /// Learning rate for 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let t = &self.train;
        let boundary = (t.lr_decay_at * t.epochs as f64).floor() as usize;
        if epoch >= boundary && t.lr_decay_at < 1.0 {
            t.learning_rate * t.lr_decay_factor
        } else {
            t.learning_rate
        }
    }

    /// Manifest keys that fix the encoder architecture.
    pub fn architecture_manifest(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let widths: Vec<String> = m.stage_widths.iter().map(usize::to_string).collect();
        let projection = match m.projection {
            crate::model::Projection::Linear => "linear",
            crate::model::Projection::Nonlinear => "nonlinear",
        };
        [
            ("model.stage_widths", widths.join(",")),
            ("model.embedding_dim", m.embedding_dim.to_string()),
            ("model.use_ibn", m.use_ibn.to_string()),
            ("model.residual", m.residual.to_string()),
            ("model.projection", projection.to_string()),
            ("model.layers", m.layers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub clusters: usize,
    pub clustered: usize,
    /// Mean minibatch loss; `None` for an epoch skipped because nothing clustered.
    pub loss: Option<f64>,
    pub cacc: Option<f64>,
    pub ari: Option<f64>,
    pub wall_time: f64,
    pub layers: LayerSet,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

fn parse_opt(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| !v.is_nan())
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,m,n_c,loss,cacc,ari,wall_time,layer_set";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},\"{}\"",
            self.epoch,
            self.clusters,
            self.clustered,
            opt(self.loss),
            opt(self.cacc),
            opt(self.ari),
            self.wall_time,
            self.layers
        )
    }

    fn to_manifest(&self) -> String {
        format!(
            "{} {} {} {} {} {} {}",
            self.clusters,
            self.clustered,
            opt(self.loss),
            opt(self.cacc),
            opt(self.ari),
            self.wall_time,
            self.layers
        )
    }

    fn from_manifest(epoch: usize, s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Checkpoint(format!("unreadable history row for epoch {epoch}: '{s}'"));
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            epoch,
            clusters: f[0].parse().map_err(|_| bad())?,
            clustered: f[1].parse().map_err(|_| bad())?,
            loss: parse_opt(f[2]),
            cacc: parse_opt(f[3]),
            ari: parse_opt(f[4]),
            wall_time: f[5].parse().map_err(|_| bad())?,
            layers: f[6].parse().map_err(|_| bad())?,
        })
    }
}

pub fn epoch_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Pseudo-labels of the latest clustering with the hidden ground truth, for metrics only.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSnapshot {
    pub pseudo_labels: Vec<i32>,
    pub true_labels: Vec<usize>,
}

impl ClusterSnapshot {
    /// `(CACC, ARI, contingency)`, or `None` when every sample is noise.
    pub fn metrics(&self) -> Option<(f64, f64, Contingency)> {
        let table = Contingency::new(&self.true_labels, &self.pseudo_labels).ok()?;
        Some((cacc_from_contingency(&table), ari_from_contingency(&table), table))
    }
}

/// Batch of sample indices: `batch / instances` clusters, `instances` members each.
///
/// Clusters are distinct when there are enough of them, otherwise drawn with replacement.
/// Members are distinct when the cluster is large enough, otherwise drawn with replacement.
pub fn pk_sample<R: Rng + ?Sized>(
    assignment: &ClusterAssignment,
    batch: usize,
    instances: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let m = assignment.num_clusters();
    if m == 0 {
        return Err(Error::Contract("cannot sample from an empty clustering".into()));
    }
    if instances == 0 || batch % instances != 0 {
        return Err(Error::Config(format!("batch {batch} not a multiple of instances {instances}")));
    }
    let p = batch / instances;
    let chosen: Vec<usize> = if m >= p {
        sample_indices(rng, m, p).into_vec()
    } else {
        (0..p).map(|_| rng.random_range(0..m)).collect()
    };
    let mut out = Vec::with_capacity(batch);
    for j in chosen {
        let members = &assignment.members[j];
        if members.len() >= instances {
            out.extend(sample_indices(rng, members.len(), instances).into_iter().map(|i| members[i]));
        } else {
            out.extend((0..instances).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}

/// Runs `f` on a single-thread pool when `deterministic`, directly otherwise.
pub fn run_mode<R: Send>(deterministic: bool, f: impl FnOnce() -> R + Send) -> Result<R> {
    if !deterministic {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build the single-thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Pretraining state: the model, the memory and the log so far.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: PretrainConfig,
    pub encoder: Encoder<T>,
    pub bank: Option<CentroidBank<T>>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub last_clustering: Option<ClusterSnapshot>,
    /// Optimizer updates applied so far (Adam bias correction).
    pub steps: u64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.model.clone(), config.train.seed)?;
        Ok(Self {
            config,
            encoder,
            bank: None,
            epoch: 0,
            history: Vec::new(),
            last_clustering: None,
            steps: 0,
        })
    }

    fn check_set(&self, set: &LabeledImageSet) -> Result<()> {
        if set.is_empty() {
            return Err(Error::Config("pretraining set is empty".into()));
        }
        let size = set.image_size().unwrap_or(0);
        self.config.model.check_image_size(size)
    }

    /// One epoch: clean embedding pass, pseudo-labels, memory initialization and
    /// `iterations` optimizer steps.
    pub fn run_epoch(&mut self, set: &LabeledImageSet) -> Result<EpochLog> {
        self.check_set(set)?;
        let start = Instant::now();
        let cfg = self.config.clone();
        let all: Vec<&Image> = set.images.iter().collect();
        let clean = self.encoder.encode(&all)?;
        let assignment = pseudo_label(&clean, &cfg.cluster)?;
        let snapshot = ClusterSnapshot {
            pseudo_labels: assignment.labels.clone(),
            true_labels: set.labels.clone(),
        };
        let clustering = snapshot.metrics();
        self.last_clustering = Some(snapshot);
        let m = assignment.num_clusters();
        let mut log = EpochLog {
            epoch: self.epoch + 1,
            clusters: m,
            clustered: assignment.num_clustered(),
            loss: None,
            cacc: clustering.as_ref().map(|c| c.0),
            ari: clustering.as_ref().map(|c| c.1),
            wall_time: 0.0,
            layers: cfg.model.layers.clone(),
        };
        if m == 0 {
            log::warn!("epoch {}: no clusters formed, skipping optimization", log.epoch);
            self.bank = None;
        } else {
            let centres: CentroidSet<T> = centroids(&clean.restrict(&cfg.loss.layers)?, &assignment)?;
            let mut bank = CentroidBank::init_from(&centres, T::lit(cfg.memory.momentum), self.epoch)?;
            let lr = cfg.learning_rate_at(self.epoch);
            let sgd = Sgd {
                lr,
                momentum: cfg.train.sgd_momentum,
                weight_decay: cfg.train.weight_decay,
            };
            let adam = Adam::new(lr, cfg.train.weight_decay);
            let mut rng = epoch_rng(cfg.train.seed, self.epoch);
            let mut total = 0.0;
            for _ in 0..cfg.train.iterations {
                let picks = pk_sample(&assignment, cfg.train.batch_size, cfg.train.instances, &mut rng)?;
                let seeds: Vec<u64> = picks.iter().map(|_| rng.next_u64() ^ cfg.augment.seed).collect();
                let views: Vec<Image> = picks
                    .par_iter()
                    .zip(&seeds)
                    .map(|(&i, &s)| augment::apply(&set.images[i], &cfg.augment, &mut ChaCha8Rng::seed_from_u64(s)))
                    .collect::<Result<_>>()?;
                let labels: Vec<i32> = picks.iter().map(|&i| assignment.labels[i]).collect();
                let refs: Vec<&Image> = views.iter().collect();
                let (emb, tape) = self.encoder.forward_train(&refs)?;
                let (loss, grads) = batch_mlnce(&emb, &labels, &bank, &cfg.loss)?;
                total += loss.as_f64();
                zero_grad(&mut self.encoder);
                self.encoder.backward(tape, &grads)?;
                self.steps += 1;
                match cfg.train.optimizer {
                    Optimizer::Sgd => sgd.step(&mut self.encoder),
                    Optimizer::Adam => adam.step(&mut self.encoder, self.steps),
                }
                bank.update_batch(&emb, &labels, cfg.memory.update_rule)?;
            }
            log.loss = Some(total / cfg.train.iterations as f64);
            self.bank = Some(bank);
        }
        self.epoch += 1;
        log.wall_time = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {}: m={} n_c={} loss={} cacc={} ari={}",
            log.epoch,
            log.clusters,
            log.clustered,
            opt(log.loss),
            opt(log.cacc),
            opt(log.ari)
        );
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs epochs until `epochs` are complete, calling `on_epoch` after each.
    pub fn train_until(
        &mut self,
        set: &LabeledImageSet,
        epochs: usize,
        mut on_epoch: impl FnMut(&Self) -> Result<()> + Send,
    ) -> Result<()>
    where
        T: Send,
    {
        let deterministic = self.config.train.deterministic;
        run_mode(deterministic, || {
            while self.epoch < epochs {
                self.run_epoch(set)?;
                on_epoch(self)?;
            }
            Ok(())
        })?
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.manifest.extend(self.config.architecture_manifest());
        ck.set("format", "cmcrl-pretrain-1");
        ck.set("scalar", std::any::type_name::<T>());
        ck.set("epoch", self.epoch);
        ck.set("optimizer.steps", self.steps);
        ck.set("train.seed", self.config.train.seed);
        ck.set("loss.layers", &self.config.loss.layers);
        ck.store_module("encoder", &self.encoder);
        for row in &self.history {
            ck.set(format!("history.{:04}", row.epoch), row.to_manifest());
        }
        if let Some(last) = self.history.last() {
            ck.set("metrics.loss", opt(last.loss));
            ck.set("metrics.cacc", opt(last.cacc));
            ck.set("metrics.ari", opt(last.ari));
            ck.set("metrics.clusters", last.clusters);
        }
        if let Some(bank) = &self.bank {
            ck.set("memory.epoch", bank.epoch);
            for (&k, m) in bank.layers.layers().iter().zip(&bank.per_layer) {
                ck.insert_tensor(format!("memory.layer{k}"), &m.clone().into_dyn());
            }
        }
        if let Some(snap) = &self.last_clustering {
            let pseudo: ArrayD<f64> = Array1::from_iter(snap.pseudo_labels.iter().map(|&l| l as f64)).into_dyn();
            let truth: ArrayD<f64> = Array1::from_iter(snap.true_labels.iter().map(|&l| l as f64)).into_dyn();
            ck.insert_tensor("clustering.pseudo_labels", &pseudo);
            ck.insert_tensor("clustering.true_labels", &truth);
        }
        ck
    }

    /// Rebuilds a state saved by [`TrainState::to_checkpoint`]. The architecture recorded in
    /// the manifest must match `config`.
    pub fn from_checkpoint(config: PretrainConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        ck.check_keys(&config.architecture_manifest(), |k| k.starts_with("model."))?;
        let mut state = Self::new(config)?;
        ck.restore_module("encoder", &mut state.encoder)?;
        state.epoch = ck.parse("epoch")?;
        state.steps = ck.parse("optimizer.steps")?;
        for (k, v) in &ck.manifest {
            if let Some(e) = k.strip_prefix("history.") {
                let epoch = e
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad history key '{k}'")))?;
                state.history.push(EpochLog::from_manifest(epoch, v)?);
            }
        }
        if ck.manifest.contains_key("memory.epoch") {
            let layers = state.config.loss.layers.clone();
            let per_layer = layers
                .layers()
                .iter()
                .map(|k| {
                    ck.tensor::<T>(&format!("memory.layer{k}"))?
                        .into_dimensionality()
                        .map_err(|_| Error::Checkpoint(format!("memory.layer{k} is not a matrix")))
                })
                .collect::<Result<Vec<Array2<T>>>>()?;
            state.bank = Some(CentroidBank {
                layers,
                per_layer,
                momentum: T::lit(state.config.memory.momentum),
                epoch: ck.parse("memory.epoch")?,
            });
        }
        if ck.tensors.contains_key("clustering.pseudo_labels") {
            let pseudo = ck.tensor::<f64>("clustering.pseudo_labels")?;
            let truth = ck.tensor::<f64>("clustering.true_labels")?;
            state.last_clustering = Some(ClusterSnapshot {
                pseudo_labels: pseudo.iter().map(|&v| v as i32).collect(),
                true_labels: truth.iter().map(|&v| v as usize).collect(),
            });
        }
        Ok(state)
    }
}

/// Full pretraining run from a fresh encoder.
pub fn pretrain<T: Scalar>(set: &LabeledImageSet, config: PretrainConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::new(config)?;
    let epochs = state.config.train.epochs;
    state.train_until(set, epochs, |_| Ok(()))?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

pub fn finetune_csv(rows: &[FinetuneLog]) -> String {
    let mut out = String::from("epoch,loss,train_acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.train_acc));
    }
    out
}

fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Trains `head` by minibatch softmax cross-entropy on fixed features (`N x d`).
pub fn train_head<T: Scalar>(
    features: ArrayView2<'_, T>,
    labels: &[usize],
    mut head: LinearHead<T>,
    config: &FinetuneConfig,
) -> Result<(LinearHead<T>, Vec<FinetuneLog>)> {
    config.validate()?;
    let n = features.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!("{n} feature rows for {} labels", labels.len())));
    }
    let k = head.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {bad} does not fit a head with {k} classes")));
    }
    let (shift, scale) = if config.standardize {
        let mean = features.mean_axis(Axis(0)).expect("nonempty features");
        let std = features.map_axis(Axis(0), |c| {
            let m = c.mean().expect("nonempty column");
            let var = c.fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / T::from_usize_lossy(n);
            var.sqrt().max(T::lit(1e-6))
        });
        (mean, std)
    } else {
        (Array1::zeros(features.ncols()), Array1::ones(features.ncols()))
    };
    let features = (&features - &shift) / &scale;
    // the head is trained in standardized coordinates and mapped back at the end
    head.bias = &head.bias + &shift.dot(&head.weights);
    head.weights = &head.weights * &scale.view().insert_axis(Axis(1));
    let (lr, mu, wd) = (T::lit(config.learning_rate), T::lit(config.momentum), T::lit(config.weight_decay));
    let mut vw = Array2::<T>::zeros(head.weights.raw_dim());
    let mut vb = Array1::<T>::zeros(k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = features.select(Axis(0), chunk);
            let mut p = head.scores(&x.view())?;
            softmax_rows(&mut p);
            for (r, &i) in chunk.iter().enumerate() {
                let y = labels[i];
                total -= p[[r, y]].max(T::min_positive_value()).ln().as_f64();
                if argmax(p.row(r)) == y {
                    correct += 1;
                }
                p[[r, y]] -= T::one();
            }
            let scale = T::one() / T::from_usize_lossy(chunk.len());
            let gw = x.t().dot(&p) * scale + &head.weights * wd;
            let gb = p.sum_axis(Axis(0)) * scale;
            vw = vw * mu + gw;
            vb = vb * mu + gb;
            head.weights.scaled_add(-lr, &vw);
            head.bias.scaled_add(-lr, &vb);
        }
        history.push(FinetuneLog {
            epoch: epoch + 1,
            loss: total / n as f64,
            train_acc: correct as f64 / n as f64,
        });
    }
    head.weights = &head.weights / &scale.view().insert_axis(Axis(1));
    head.bias = &head.bias - &shift.dot(&head.weights);
    Ok((head, history))
}

/// Fits a linear head on the frozen encoder's final-stage embeddings. The encoder is only
/// borrowed immutably and run in evaluation mode, so its parameters cannot change.
pub fn finetune<T: Scalar>(
    encoder: &Encoder<T>,
    set: &LabeledImageSet,
    config: &FinetuneConfig,
) -> Result<(LinearHead<T>, Vec<FinetuneLog>)> {
    if set.labels_hidden {
        return Err(Error::Contract("fine-tuning needs a set with visible labels".into()));
    }
    if set.is_empty() {
        return Err(Error::Config("fine-tuning set is empty".into()));
    }
    let refs: Vec<&Image> = set.images.iter().collect();
    let emb = encoder.encode(&refs)?;
    let head = LinearHead::zeros(emb.dim(), set.num_classes());
    train_head(emb.final_layer(), &set.labels, head, config)
}

pub fn predict<T: Scalar>(encoder: &Encoder<T>, head: &LinearHead<T>, images: &[&Image]) -> Result<Vec<usize>> {
    let emb = encoder.encode(images)?;
    let scores = head.scores(&emb.final_layer())?;
    Ok(scores.outer_iter().map(argmax).collect())
}

pub fn evaluate<T: Scalar>(
    encoder: &Encoder<T>,
    head: &LinearHead<T>,
    test: &LabeledImageSet,
    clustering: Option<&ClusterSnapshot>,
    f1: F1Mode,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    if test.num_classes() != head.num_classes() {
        return Err(Error::Config(format!(
            "test set has {} classes, head {}",
            test.num_classes(),
            head.num_classes()
        )));
    }
    let refs: Vec<&Image> = test.images.iter().collect();
    let pred = predict(encoder, head, &refs)?;
    let cls = classification_metrics(&test.labels, &pred, head.num_classes(), f1)?;
    Ok(MetricsReport::from_parts(cls, clustering.and_then(ClusterSnapshot::metrics)))
}

pub fn head_to_checkpoint<T: Scalar>(head: &LinearHead<T>, ck: &mut Checkpoint) {
    ck.set("head.classes", head.num_classes());
    ck.set("head.dim", head.dim());
    ck.insert_tensor("head.weights", &head.weights.clone().into_dyn());
    ck.insert_tensor("head.bias", &head.bias.clone().into_dyn());
}

pub fn head_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<LinearHead<T>> {
    let weights = ck
        .tensor::<T>("head.weights")?
        .into_dimensionality()
        .map_err(|_| Error::Checkpoint("head.weights is not a matrix".into()))?;
    let bias = ck
        .tensor::<T>("head.bias")?
        .into_dimensionality()
        .map_err(|_| Error::Checkpoint("head.bias is not a vector".into()))?;
    Ok(LinearHead { weights, bias })
}
