//! Image corpora: folder-per-class ingestion, stratified splitting, and a synthetic
//! texture corpus for desk-scale runs.
//!
//! Images are stored channel-first (`C x H x W`, three channels) with values in `[0, 1]`.
//! Class labels are 0-based indices into `class_names`, which are sorted lexicographically.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use log::warn;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-first RGB image with values in `[0, 1]`.
pub type Image = Array3<f32>;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Pretrain,
    Finetune,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: SplitTag,
    /// Set on the pretraining split: labels exist but only metrics may read them.
    pub labels_hidden: bool,
    /// Index of every image in the corpus it was split from.
    pub source_indices: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let set = Self {
            source_indices: (0..images.len()).collect(),
            images,
            labels,
            class_names,
            split: SplitTag::Full,
            labels_hidden: false,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Config(format!(
                "at least two classes required, got {}",
                self.class_names.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Shape(format!("label {bad} without a class name")));
        }
        if let Some(first) = self.images.first() {
            let shape = first.shape();
            if let Some(i) = self.images.iter().position(|im| im.shape() != shape) {
                return Err(Error::Shape(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    self.images[i].shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Spatial size of the (square) images.
    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|im| im.shape()[1])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split,
            labels_hidden: split == SplitTag::Pretrain,
            source_indices: indices.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }

    /// Writes the set as `root/<class_name>/<index>.png`.
    pub fn export(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        self.images
            .par_iter()
            .zip(&self.labels)
            .enumerate()
            .try_for_each(|(i, (img, &label))| {
                let path = root.join(&self.class_names[label]).join(format!("{i:05}.png"));
                to_rgb8(img)
                    .save(&path)
                    .map_err(|source| Error::Image { path, source })
            })
    }
}

fn to_rgb8(img: &Image) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb8(buf: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Image {
    let (w, h) = buf.dimensions();
    Array3::from_shape_fn((CHANNELS, h as usize, w as usize), |(c, y, x)| {
        buf.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` with classes ordered lexicographically, converting every image
/// to RGB and resizing it bilinearly to `target_size x target_size`. Undecodable files are
/// skipped with a warning.
pub fn load_corpus(root: &Path, target_size: usize) -> Result<LabeledImageSet> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "corpus root {} is not a directory",
            root.display()
        )));
    }
    if target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Ingestion(format!("class directory '{name}' is empty")));
        }
        let decoded: Vec<Option<Image>> = files
            .par_iter()
            .map(|path| match image::open(path) {
                Ok(img) => {
                    let rgb = img.to_rgb8();
                    let resized = image::imageops::resize(
                        &rgb,
                        target_size as u32,
                        target_size as u32,
                        FilterType::Triangle,
                    );
                    Some(from_rgb8(&resized))
                }
                Err(e) => {
                    warn!("skipping undecodable file {}: {e}", path.display());
                    None
                }
            })
            .collect();
        let before = images.len();
        for img in decoded.into_iter().flatten() {
            images.push(img);
            labels.push(label);
        }
        if images.len() == before {
            return Err(Error::Ingestion(format!(
                "class '{name}' has no decodable images"
            )));
        }
        class_names.push(name);
    }
    LabeledImageSet::new(images, labels, class_names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            pretrain_fraction: 0.8,
            finetune_fraction: 0.15,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    fn fractions(&self) -> [f64; 3] {
        [self.pretrain_fraction, self.finetune_fraction, self.test_fraction]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config(format!("split fractions must be nonnegative: {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` over `fractions`.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[s] > 0.0 {
            counts[s] += 1;
            left -= 1;
        }
    }
    counts
}

/// Per-class quotas whose column sums hit the global targets and whose entries stay within
/// one image of the exact proportion.
fn stratified_quotas(class_sizes: &[usize], fractions: &[f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = class_sizes.iter().sum();
    let targets = apportion(total, fractions);
    let mut quotas: Vec<[usize; 3]> = Vec::with_capacity(class_sizes.len());
    let mut remainders = Vec::new();
    for (c, &n) in class_sizes.iter().enumerate() {
        let mut q = [0usize; 3];
        for s in 0..3 {
            let exact = fractions[s] * n as f64;
            q[s] = exact.floor() as usize;
            remainders.push((exact - exact.floor(), c, s));
        }
        quotas.push(q);
    }
    let mut capacity: Vec<isize> = (0..3)
        .map(|s| targets[s] as isize - quotas.iter().map(|q| q[s] as isize).sum::<isize>())
        .collect();
    let mut need: Vec<usize> = class_sizes
        .iter()
        .zip(&quotas)
        .map(|(&n, q)| n - q.iter().sum::<usize>())
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(r, c, s) in &remainders {
        if r > 0.0 && need[c] > 0 && capacity[s] > 0 {
            quotas[c][s] += 1;
            need[c] -= 1;
            capacity[s] -= 1;
        }
    }
    // Classes still short: move an earlier round-up along a chain of splits until one has room.
    let open = |quotas: &Vec<[usize; 3]>, c: usize, s: usize| {
        let exact = fractions[s] * class_sizes[c] as f64;
        exact > exact.floor() && quotas[c][s] == exact.floor() as usize
    };
    let raised = |quotas: &Vec<[usize; 3]>, c: usize, s: usize| {
        quotas[c][s] > (fractions[s] * class_sizes[c] as f64).floor() as usize
    };
    for c in 0..class_sizes.len() {
        while need[c] > 0 {
            let starts: Vec<usize> = (0..3).filter(|&s| open(&quotas, c, s)).collect();
            let fallback = *starts
                .iter()
                .chain([0, 1, 2].iter().filter(|&&s| fractions[s] > 0.0))
                .max_by_key(|&&s| (capacity[s] > 0, starts.contains(&s)))
                .expect("a positive fraction");
            // Breadth-first search over splits; an edge s -> t carries a class raised at s
            // and still open at t.
            let mut via: [Option<(usize, usize)>; 3] = [None; 3];
            let mut seen = [false; 3];
            let mut queue: std::collections::VecDeque<usize> = starts.iter().copied().collect();
            for &s in &starts {
                seen[s] = true;
            }
            let mut goal = None;
            while let Some(s) = queue.pop_front() {
                if capacity[s] > 0 {
                    goal = Some(s);
                    break;
                }
                for t in 0..3 {
                    if seen[t] {
                        continue;
                    }
                    if let Some(o) = (0..class_sizes.len()).find(|&o| raised(&quotas, o, s) && open(&quotas, o, t)) {
                        seen[t] = true;
                        via[t] = Some((s, o));
                        queue.push_back(t);
                    }
                }
            }
            let mut t = match goal {
                Some(t) => t,
                // Targets unreachable within the bounds: let that split run one over.
                None => fallback,
            };
            capacity[t] -= 1;
            while let Some((s, o)) = via[t] {
                quotas[o][t] += 1;
                quotas[o][s] -= 1;
                t = s;
            }
            quotas[c][t] += 1;
            need[c] -= 1;
        }
    }
    quotas
}

/// Stratified split into pretrain, finetune and test sets. Deterministic for a fixed seed.
///
/// A class with fewer images than there are nonempty splits goes entirely to pretrain.
pub fn split(
    set: &LabeledImageSet,
    spec: &SplitSpec,
) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    spec.validate()?;
    let fractions = spec.fractions();
    let active_splits = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
    for (i, &l) in set.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "class '{}' has no images to split",
            set.class_names[c]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    let (small, regular): (Vec<usize>, Vec<usize>) =
        (0..by_class.len()).partition(|&c| by_class[c].len() < active_splits);
    for &c in &small {
        warn!(
            "class '{}' has {} images, fewer than {active_splits} splits; all go to pretrain",
            set.class_names[c],
            by_class[c].len()
        );
        parts[0].extend(&by_class[c]);
    }
    let sizes: Vec<usize> = regular.iter().map(|&c| by_class[c].len()).collect();
    let quotas = stratified_quotas(&sizes, &fractions);
    for (&c, q) in regular.iter().zip(&quotas) {
        let members = &by_class[c];
        let mut start = 0;
        for s in 0..3 {
            parts[s].extend(&members[start..start + q[s]]);
            start += q[s];
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        set.subset(&parts[0], SplitTag::Pretrain),
        set.subset(&parts[1], SplitTag::Finetune),
        set.subset(&parts[2], SplitTag::Test),
    ))
}

/// Texture family of a synthetic class. Classes cycle through the families; repeated families
/// differ in spatial frequency. Every family covers about half of the image with foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Stripes,
    Checker,
    Rings,
    Dots,
}

const FAMILIES: [Family; 4] = [Family::Stripes, Family::Checker, Family::Rings, Family::Dots];

/// Half the foreground/background separation along the class chroma axis.
const CHROMA_CONTRAST: f32 = 0.5;
const GREY_JITTER: f32 = 0.05;
const MAX_TILT_DEGREES: f32 = 45.0;
const PIXEL_NOISE: f32 = 0.08;

/// Foreground and background lie symmetrically around a grey level along a class-specific
/// chroma axis, so all classes share the same mean colour and raw-pixel class means carry
/// almost no signal. Phase, tilt, centre, period and pixel noise are nuisance.
fn synthetic_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let family = FAMILIES[class % FAMILIES.len()];
    let octave = (class / FAMILIES.len()) as f32;
    let s = size as f32;
    let theta = (45.0 * (class % FAMILIES.len()) as f32 + 22.5 * octave).to_radians();
    let (r2, r6) = (2f32.sqrt(), 6f32.sqrt());
    let axis = [
        theta.cos() / r2 + theta.sin() / r6,
        -theta.cos() / r2 + theta.sin() / r6,
        -2.0 * theta.sin() / r6,
    ];
    let grey = 0.5 + rng.random_range(-GREY_JITTER..GREY_JITTER);
    let fg = axis.map(|a| grey + CHROMA_CONTRAST * a);
    let bg = axis.map(|a| grey - CHROMA_CONTRAST * a);
    let period = s / rng.random_range(3.0..4.5) / (1.0 + 0.6 * octave);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let angle = rng.random_range(-MAX_TILT_DEGREES..MAX_TILT_DEGREES).to_radians();
    let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let (ca, sa) = (angle.cos(), angle.sin());
    let tau = std::f32::consts::TAU;
    let mut img = Array3::zeros((CHANNELS, size, size));
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let u = ca * dx + sa * dy;
            let v = -sa * dx + ca * dy;
            let t = match family {
                Family::Stripes => (tau * u / period + phase).sin(),
                Family::Checker => (tau * u / period + phase).sin() * (tau * v / period + phase).sin(),
                Family::Rings => (tau * (dx * dx + dy * dy).sqrt() / period + phase).sin(),
                Family::Dots => {
                    let a = (tau * u / period + phase).cos();
                    let b = (tau * v / period + phase).cos();
                    if a + b > 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            let w = 0.5 * (1.0 + t.clamp(-1.0, 1.0));
            for c in 0..CHANNELS {
                let jitter: f32 = rng.random_range(-PIXEL_NOISE..PIXEL_NOISE);
                let val = w * fg[c] + (1.0 - w) * bg[c] + jitter;
                img[[c, y, x]] = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    img
}

/// Synthetic corpus of `n_classes x per_class` textures. Pixel values are quantized to 8-bit
/// levels so exporting and reloading reproduces them exactly.
pub fn make_synthetic(
    n_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    if per_class < 8 {
        return Err(Error::Config(format!("need at least 8 images per class, got {per_class}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    let jobs: Vec<(usize, usize)> = (0..n_classes)
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let images: Vec<Image> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let stream = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((c * per_class + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            synthetic_image(c, size, &mut rng)
        })
        .collect();
    let labels = jobs.iter().map(|&(c, _)| c).collect();
    let class_names = (0..n_classes).map(|c| format!("class_{c:02}")).collect();
    LabeledImageSet::new(images, labels, class_names)
}
