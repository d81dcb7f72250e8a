//! Four-stage convolutional encoder with per-stage projection heads, and the linear
//! classification head used for fine-tuning.
//!
//! Each stage halves the spatial size (`conv3x3/2 -> norm -> relu -> conv3x3 -> norm`, plus a
//! parameter-free shortcut when `residual` is set, then relu). The shortcut is 2x2 average
//! pooling followed by zero-padding of the extra channels.
//! A stage in the layer set is read out by global average pooling, its own projection head
//! and L2 normalization. Heads are not shared between stages.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, CHANNELS};
use crate::embedding::{EmbeddingBatch, LayerSet, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, Conv2d, ConvCache, Linear,
    LinearCache, Module, Norm2d, NormCache, Slot,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Single affine map.
    Linear,
    /// Affine, ReLU, affine (hidden width = embedding dimension).
    #[default]
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_widths: [usize; NUM_STAGES],
    pub embedding_dim: usize,
    pub use_ibn: bool,
    pub residual: bool,
    pub projection: Projection,
    pub layers: LayerSet,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_widths: [32, 64, 128, 256],
            embedding_dim: 512,
            use_ibn: true,
            residual: true,
            projection: Projection::Nonlinear,
            layers: LayerSet::all(),
        }
    }
}

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLING: usize = 1 << NUM_STAGES;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "stage widths must be positive, got {:?}",
                self.stage_widths
            )));
        }
        let mut cin = CHANNELS;
        for &w in &self.stage_widths {
            if self.residual && w < cin {
                return Err(Error::Config(format!(
                    "residual stages cannot narrow the channel count ({cin} -> {w})"
                )));
            }
            cin = w;
        }
        Ok(())
    }

    pub fn check_image_size(&self, size: usize) -> Result<()> {
        if size == 0 || size % DOWNSAMPLING != 0 {
            return Err(Error::Config(format!(
                "image size {size} must be a positive multiple of {DOWNSAMPLING} for {NUM_STAGES} stride-2 stages"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage<T> {
    conv_a: Conv2d<T>,
    norm_a: Norm2d<T>,
    conv_b: Conv2d<T>,
    norm_b: Norm2d<T>,
    residual: bool,
}

struct StageCache<T> {
    conv_a: ConvCache<T>,
    norm_a: NormCache<T>,
    act_a: Array4<T>,
    conv_b: ConvCache<T>,
    norm_b: NormCache<T>,
    act_b: Array4<T>,
}

impl<T: Scalar> Stage<T> {
    fn new(cin: usize, cout: usize, ibn: bool, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_a: Conv2d::new(cin, cout, 2, rng),
            norm_a: Norm2d::new(cout, if ibn { cout / 2 } else { 0 }),
            conv_b: Conv2d::new(cout, cout, 1, rng),
            norm_b: Norm2d::new(cout, 0),
            residual,
        }
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (h, _) = self.conv_a.forward(x, false);
        let h = relu(&self.norm_a.forward_eval(&h).0);
        let (h, _) = self.conv_b.forward(&h, false);
        let mut h = self.norm_b.forward_eval(&h).0;
        if self.residual {
            h += &shortcut(x, h.dim().1);
        }
        relu(&h)
    }

    fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, StageCache<T>) {
        let (h, conv_a) = self.conv_a.forward(x, true);
        let (h, norm_a) = self.norm_a.forward_train(&h);
        let act_a = relu(&h);
        let (h, conv_b) = self.conv_b.forward(&act_a, true);
        let (mut h, norm_b) = self.norm_b.forward_train(&h);
        if self.residual {
            h += &shortcut(x, h.dim().1);
        }
        let act_b = relu(&h);
        let cache = StageCache {
            conv_a: conv_a.expect("cache"),
            norm_a,
            act_a,
            conv_b: conv_b.expect("cache"),
            norm_b,
            act_b: act_b.clone(),
        };
        (act_b, cache)
    }

    fn backward(&mut self, cache: StageCache<T>, grad: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let g = relu_backward(&cache.act_b, grad);
        let skip = (self.residual && need_input_grad).then(|| shortcut_backward(&g, self.conv_a.in_channels));
        let g = self.norm_b.backward(cache.norm_b, &g);
        let g = self.conv_b.backward(cache.conv_b, &g, true).expect("input grad");
        let g = relu_backward(&cache.act_a, &g);
        let g = self.norm_a.backward(cache.norm_a, &g);
        let g = self.conv_a.backward(cache.conv_a, &g, need_input_grad);
        match (g, skip) {
            (Some(g), Some(s)) => Some(g + s),
            (g, _) => g,
        }
    }
}

/// 2x2 average pooling, channels zero-padded up to `cout`.
fn shortcut<T: Scalar>(x: &Array4<T>, cout: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let quarter = T::lit(0.25);
    let mut out = Array4::zeros((n, cout, h / 2, w / 2));
    for ((b, ch, i, j), v) in out.slice_mut(ndarray::s![.., ..c, .., ..]).indexed_iter_mut() {
        *v = (x[[b, ch, 2 * i, 2 * j]] + x[[b, ch, 2 * i, 2 * j + 1]] + x[[b, ch, 2 * i + 1, 2 * j]] + x[[b, ch, 2 * i + 1, 2 * j + 1]]) * quarter;
    }
    out
}

fn shortcut_backward<T: Scalar>(grad: &Array4<T>, cin: usize) -> Array4<T> {
    let (n, _, h, w) = grad.dim();
    let quarter = T::lit(0.25);
    Array4::from_shape_fn((n, cin, 2 * h, 2 * w), |(b, ch, i, j)| grad[[b, ch, i / 2, j / 2]] * quarter)
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.conv_a.visit(&format!("{prefix}.conv_a"), f);
        self.norm_a.visit(&format!("{prefix}.norm_a"), f);
        self.conv_b.visit(&format!("{prefix}.conv_b"), f);
        self.norm_b.visit(&format!("{prefix}.norm_b"), f);
    }
}

#[derive(Debug, Clone)]
struct Head<T> {
    fc1: Linear<T>,
    fc2: Option<Linear<T>>,
}

struct HeadCache<T> {
    spatial: (usize, usize),
    fc1: LinearCache<T>,
    hidden: Option<(Array2<T>, LinearCache<T>)>,
    output: Array2<T>,
    norms: Array1<T>,
}

impl<T: Scalar> Head<T> {
    fn new(inputs: usize, dim: usize, projection: Projection, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(inputs, dim, rng),
            fc2: (projection == Projection::Nonlinear).then(|| Linear::new(dim, dim, rng)),
        }
    }

    fn forward(&self, fmap: &Array4<T>, keep: bool) -> (Array2<T>, Option<HeadCache<T>>) {
        let (_, _, h, w) = fmap.dim();
        let pooled = fmap
            .mean_axis(Axis(3))
            .and_then(|m| m.mean_axis(Axis(2)))
            .expect("nonempty feature map");
        let (z, fc1) = self.fc1.forward(&pooled, keep);
        let (z, hidden) = match &self.fc2 {
            Some(fc2) => {
                let act = relu(&z);
                let (out, c2) = fc2.forward(&act, keep);
                (out, c2.map(|c| (act, c)))
            }
            None => (z, None),
        };
        let (out, norms) = l2_normalize_rows(&z);
        let cache = keep.then(|| HeadCache {
            spatial: (h, w),
            fc1: fc1.expect("cache"),
            hidden,
            output: out.clone(),
            norms,
        });
        (out, cache)
    }

    fn backward(&mut self, cache: HeadCache<T>, grad: &Array2<T>) -> Array4<T> {
        let mut g = l2_normalize_rows_backward(&cache.output, &cache.norms, grad);
        if let (Some(fc2), Some((act, c2))) = (self.fc2.as_mut(), cache.hidden) {
            g = fc2.backward(c2, &g);
            g = relu_backward(&act, &g);
        }
        let g = self.fc1.backward(cache.fc1, &g);
        let (h, w) = cache.spatial;
        let scale = T::one() / T::from_usize_lossy(h * w);
        let (n, c) = g.dim();
        Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| g[[b, ch]] * scale)
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        if let Some(fc2) = self.fc2.as_mut() {
            fc2.visit(&format!("{prefix}.fc2"), f);
        }
    }
}

/// Forward record of a training pass, consumed by [`Encoder::backward`].
pub struct Tape<T> {
    stages: Vec<StageCache<T>>,
    heads: Vec<HeadCache<T>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    stages: Vec<Stage<T>>,
    /// One head per stage of `config.layers`, in the same order.
    heads: Vec<Head<T>>,
}

/// Stacks images into an `N x C x H x W` tensor of the model scalar.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Array4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (c, h, w) = first.dim();
    if c != CHANNELS {
        return Err(Error::Shape(format!("expected {CHANNELS} channels, got {c}")));
    }
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "image {i} has shape {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(&img.mapv(|v| T::lit(v as f64)));
    }
    Ok(out)
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = CHANNELS;
        for (k, &cout) in config.stage_widths.iter().enumerate() {
            // instance normalization only in the two shallow stages
            stages.push(Stage::new(cin, cout, config.use_ibn && k < 2, config.residual, &mut rng));
            cin = cout;
        }
        let heads = config
            .layers
            .layers()
            .iter()
            .map(|&k| {
                // one stream per stage so a head's weights do not depend on the layer set
                let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
                head_rng.set_stream(k as u64);
                Head::new(
                    config.stage_widths[k - 1],
                    config.embedding_dim,
                    config.projection,
                    &mut head_rng,
                )
            })
            .collect();
        Ok(Self { config, stages, heads })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_batch(&self, images: &[&Image]) -> Result<Array4<T>> {
        let x = images_to_tensor(images)?;
        let (_, _, h, w) = x.dim();
        if h != w {
            return Err(Error::Config(format!("images must be square, got {h}x{w}")));
        }
        self.config.check_image_size(h)?;
        Ok(x)
    }

    fn collect_heads(&self, fmaps: &[Array4<T>], keep: bool) -> (EmbeddingBatch<T>, Vec<HeadCache<T>>) {
        let mut per_layer = Vec::with_capacity(self.heads.len());
        let mut caches = Vec::new();
        for (head, &k) in self.heads.iter().zip(self.config.layers.layers()) {
            let (z, cache) = head.forward(&fmaps[k - 1], keep);
            per_layer.push(z);
            caches.extend(cache);
        }
        let batch = EmbeddingBatch {
            layers: self.config.layers.clone(),
            per_layer,
        };
        (batch, caches)
    }

    /// Evaluation-mode embeddings (running statistics, no caches), processed in chunks.
    pub fn encode(&self, images: &[&Image]) -> Result<EmbeddingBatch<T>> {
        const CHUNK: usize = 64;
        let mut parts = Vec::new();
        for chunk in images.chunks(CHUNK) {
            let mut x = self.check_batch(chunk)?;
            let mut fmaps = Vec::with_capacity(NUM_STAGES);
            for stage in &self.stages {
                x = stage.forward_eval(&x);
                fmaps.push(x.clone());
            }
            parts.push(self.collect_heads(&fmaps, false).0);
        }
        if parts.len() == 1 {
            return Ok(parts.pop().expect("one part"));
        }
        let per_layer = (0..self.config.layers.len())
            .map(|p| {
                let views: Vec<_> = parts.iter().map(|b| b.per_layer[p].view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("equal widths")
            })
            .collect();
        Ok(EmbeddingBatch {
            layers: self.config.layers.clone(),
            per_layer,
        })
    }

    /// Training-mode forward: batch statistics (running averages updated) and a tape for
    /// [`Encoder::backward`].
    pub fn forward_train(&mut self, images: &[&Image]) -> Result<(EmbeddingBatch<T>, Tape<T>)> {
        let mut x = self.check_batch(images)?;
        let mut fmaps = Vec::with_capacity(NUM_STAGES);
        let mut stage_caches = Vec::with_capacity(NUM_STAGES);
        for stage in &mut self.stages {
            let (out, cache) = stage.forward_train(&x);
            stage_caches.push(cache);
            fmaps.push(out.clone());
            x = out;
        }
        let (batch, heads) = self.collect_heads(&fmaps, true);
        Ok((
            batch,
            Tape {
                stages: stage_caches,
                heads,
            },
        ))
    }

    /// Accumulates parameter gradients given the gradient of the objective with respect to
    /// the normalized embeddings. `grads` may cover a subset of the encoder's layers.
    pub fn backward(&mut self, tape: Tape<T>, grads: &EmbeddingBatch<T>) -> Result<()> {
        if !grads.layers.is_subset_of(&self.config.layers) {
            return Err(Error::Contract(format!(
                "gradient layers {} not produced by encoder layers {}",
                grads.layers, self.config.layers
            )));
        }
        let mut fmap_grads: Vec<Option<Array4<T>>> = (0..NUM_STAGES).map(|_| None).collect();
        for ((head, cache), &k) in self
            .heads
            .iter_mut()
            .zip(tape.heads)
            .zip(self.config.layers.layers())
        {
            if let Some(g) = grads.layer(k) {
                fmap_grads[k - 1] = Some(head.backward(cache, &g.to_owned()));
            }
        }
        let mut carry: Option<Array4<T>> = None;
        for (k, (stage, cache)) in self.stages.iter_mut().zip(tape.stages).enumerate().rev() {
            let grad = match (carry.take(), fmap_grads[k].take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            carry = stage.backward(cache, &grad, k > 0);
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of every parameter and buffer value.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut copy = self.clone();
        copy.visit("", &mut |name, slot| {
            feed(name.as_bytes());
            let values: &ArrayD<T> = match slot {
                Slot::Param(p) => &p.value,
                Slot::Buffer(b) => b,
            };
            for v in values.iter() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        });
        hash
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.clone().visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        for (k, stage) in self.stages.iter_mut().enumerate() {
            stage.visit(&crate::nn::join(prefix, &format!("stage{}", k + 1)), f);
        }
        let layers = self.config.layers.clone();
        for (head, &k) in self.heads.iter_mut().zip(layers.layers()) {
            head.visit(&crate::nn::join(prefix, &format!("head{k}")), f);
        }
    }
}

/// Linear classifier on the final embedding: `scores = W^T z + b`, `W` is `d x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weights: Array2::zeros((dim, classes)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Scores for a batch of embeddings (`N x d`).
    pub fn scores(&self, embeddings: &ndarray::ArrayView2<'_, T>) -> Result<Array2<T>> {
        if embeddings.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding dimension {} vs head dimension {}",
                embeddings.ncols(),
                self.dim()
            )));
        }
        Ok(embeddings.dot(&self.weights) + &self.bias)
    }
}

/// Affine class scores for one embedding.
pub fn classify<T: Scalar>(embedding: ArrayView1<'_, T>, head: &LinearHead<T>) -> Result<Array1<T>> {
    if embedding.len() != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension {} vs head dimension {}",
            embedding.len(),
            head.dim()
        )));
    }
    Ok(head.weights.t().dot(&embedding) + &head.bias)
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(scores: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn classify_examples() {
        let head = LinearHead::<f64>::zeros(3, 4);
        let s = classify(array![0.2, -0.1, 0.5].view(), &head).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert_eq!(argmax(s.view()), 0);

        let mut forced = LinearHead::<f64>::zeros(3, 4);
        forced.weights[[1, 2]] = 100.0;
        let s = classify(array![0.0, 1.0, 0.0].view(), &forced).unwrap();
        assert_eq!(argmax(s.view()), 2);

        assert!(matches!(
            classify(array![1.0, 2.0].view(), &head),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn image_size_must_survive_downsampling() {
        let cfg = EncoderConfig::default();
        assert!(cfg.check_image_size(32).is_ok());
        assert!(cfg.check_image_size(24).is_err());
        let enc = Encoder::<f32>::new(
            EncoderConfig { stage_widths: [4, 4, 4, 4], embedding_dim: 8, ..Default::default() },
            0,
        )
        .unwrap();
        let img = Image::zeros((3, 20, 20));
        assert!(matches!(enc.encode(&[&img]), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        use rand::Rng;
        let cfg = EncoderConfig {
            stage_widths: [4, 4, 6, 6],
            embedding_dim: 5,
            use_ibn: true,
            ..Default::default()
        };
        let mut enc = Encoder::<f64>::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images: Vec<Image> = (0..3)
            .map(|_| Image::from_shape_simple_fn((3, 16, 16), || rng.random_range(0.0..1.0)))
            .collect();
        let refs: Vec<&Image> = images.iter().collect();
        let probes: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0)))
            .collect();
        let objective = |e: &Encoder<f64>| {
            let (z, _) = e.clone().forward_train(&refs).unwrap();
            z.per_layer.iter().zip(&probes).map(|(a, p)| (a * p).sum()).sum::<f64>()
        };
        let (_, tape) = enc.forward_train(&refs).unwrap();
        let grads = EmbeddingBatch {
            layers: LayerSet::all(),
            per_layer: probes.clone(),
        };
        enc.backward(tape, &grads).unwrap();
        let mut checked = 0;
        let names = ["stage1.conv_a.weight", "stage2.norm_a.gamma", "stage3.conv_b.weight", "head1.fc1.weight", "head4.fc2.bias"];
        for name in names {
            let mut analytic = None;
            enc.clone().visit("", &mut |n, slot| {
                if let (true, Slot::Param(p)) = (n == name, slot) {
                    analytic = Some((p.grad.as_slice().unwrap()[1], p.value.len()));
                }
            });
            let (ana, _) = analytic.unwrap_or_else(|| panic!("missing {name}"));
            let h = 1e-5;
            let shifted = |delta: f64| {
                let mut e = enc.clone();
                e.visit("", &mut |n, slot| {
                    if let (true, Slot::Param(p)) = (n == name, slot) {
                        p.value.as_slice_mut().unwrap()[1] += delta;
                    }
                });
                objective(&e)
            };
            let num = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}: numeric {num} analytic {ana}");
            checked += 1;
        }
        assert_eq!(checked, names.len());
    }
}
