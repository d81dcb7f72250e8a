use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array1, Array2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmcrl_core::cluster::{centroids, ClusterAssignment};
use cmcrl_core::data::{load_corpus, make_synthetic, split, Image, LabeledImageSet, SplitSpec};
use cmcrl_core::loss::{batch_mlnce, LossConfig};
use cmcrl_core::memory::{CentroidBank, UpdateRule};
use cmcrl_core::metrics::F1Mode;
use cmcrl_core::model::Encoder;
use cmcrl_core::nn::{zero_grad, Sgd};
use cmcrl_core::train::{evaluate, finetune, FinetuneConfig, PretrainConfig};
use cmcrl_core::{augment, Error};

fn write_pngs(dir: &Path, count: usize, size: u32) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = ImageBuffer::from_fn(size, size, |x, y| Rgb([(x * 40) as u8, (y * 40) as u8, (i * 7) as u8]));
        img.save(dir.join(format!("{i:04}.png"))).unwrap();
    }
}

#[test]
fn load_two_class_directory() {
    let root = tempfile::tempdir().unwrap();
    write_pngs(&root.path().join("canker"), 3, 5);
    write_pngs(&root.path().join("blackspot"), 2, 6);
    let set = load_corpus(root.path(), 64).unwrap();
    assert_eq!(set.len(), 5);
    assert_eq!(set.num_classes(), 2);
    assert_eq!(set.class_names, ["blackspot", "canker"]);
    assert_eq!(set.labels, [0, 0, 1, 1, 1]);
    assert!(set.images.iter().all(|im| im.shape() == [3, 64, 64]));

    let again = load_corpus(root.path(), 64).unwrap();
    assert_eq!(set, again);
}

#[test]
fn load_corpus_with_leaf_dataset_counts() {
    let root = tempfile::tempdir().unwrap();
    let counts = [("blackspot", 171), ("canker", 163), ("huanglong", 204), ("health", 58), ("melanose", 13)];
    for (name, n) in counts {
        write_pngs(&root.path().join(name), n, 4);
    }
    let set = load_corpus(root.path(), 256).unwrap();
    assert_eq!(set.len(), 609);
    assert_eq!(set.num_classes(), 5);
    assert_eq!(set.class_counts(), [171, 163, 58, 204, 13]);
    assert_eq!(set.image_size(), Some(256));
}

#[test]
fn empty_class_directory_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    write_pngs(&root.path().join("blackspot"), 2, 4);
    fs::create_dir_all(root.path().join("canker")).unwrap();
    let err = load_corpus(root.path(), 16).unwrap_err();
    assert!(matches!(err, Error::Ingestion(_)), "{err}");
}

#[test]
fn synthetic_corpus_survives_export_and_reload() {
    let set = make_synthetic(3, 8, 16, 5).unwrap();
    let root = tempfile::tempdir().unwrap();
    set.export(root.path()).unwrap();
    let back = load_corpus(root.path(), 16).unwrap();
    assert_eq!(back.images, set.images);
    assert_eq!(back.labels, set.labels);
    assert_eq!(back.class_names, set.class_names);
}

fn flat_images(set: &LabeledImageSet) -> Array2<f32> {
    let dim = set.images[0].len();
    let mut x = Array2::zeros((set.len(), dim));
    for (mut row, im) in x.axis_iter_mut(Axis(0)).zip(&set.images) {
        row.assign(&Array1::from_iter(im.iter().copied()));
    }
    x
}

fn half_split(seed: u64) -> (LabeledImageSet, LabeledImageSet) {
    let corpus = make_synthetic(4, 64, 32, seed).unwrap();
    let spec = SplitSpec {
        pretrain_fraction: 0.5,
        finetune_fraction: 0.0,
        test_fraction: 0.5,
        seed,
    };
    let (train, _, test) = split(&corpus, &spec).unwrap();
    (train, test)
}

#[test]
fn raw_pixel_nearest_centroid_stays_below_point_nine() {
    for seed in 0..4 {
        let (train, test) = half_split(seed);
        let (xtr, xte) = (flat_images(&train), flat_images(&test));
        let means: Vec<Array1<f32>> = (0..4)
            .map(|c| {
                let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
                xtr.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()
            })
            .collect();
        let correct = xte
            .outer_iter()
            .zip(&test.labels)
            .filter(|(x, &y)| {
                let dist = |c: usize| (&means[c] - x).mapv(|v| v * v).sum();
                (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap() == y
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc < 0.9, "seed {seed}: raw nearest-centroid accuracy {acc}");
    }
}

#[test]
fn raw_pixel_two_layer_probe_beats_chance() {
    let (train, test) = half_split(0);
    let (mut xtr, mut xte) = (flat_images(&train), flat_images(&test));
    let mean = xtr.mean_axis(Axis(0)).unwrap();
    xtr -= &mean;
    xte -= &mean;
    let (d, hidden, k) = (xtr.ncols(), 32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scale = (2.0 / d as f32).sqrt();
    let mut w1 = Array2::from_shape_fn((d, hidden), |_| rng.random_range(-1.0f32..1.0) * scale);
    let mut b1 = Array1::<f32>::zeros(hidden);
    let mut w2 = Array2::from_shape_fn((hidden, k), |_| rng.random_range(-1.0f32..1.0) * 0.1);
    let mut b2 = Array1::<f32>::zeros(k);
    let forward = |x: &Array2<f32>, w1: &Array2<f32>, b1: &Array1<f32>, w2: &Array2<f32>, b2: &Array1<f32>| {
        let h = (x.dot(w1) + b1).mapv(|v| v.max(0.0));
        let mut p = h.dot(w2) + b2;
        for mut row in p.axis_iter_mut(Axis(0)) {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        (h, p)
    };
    let n = xtr.nrows() as f32;
    for _ in 0..300 {
        let (h, mut p) = forward(&xtr, &w1, &b1, &w2, &b2);
        for (i, &y) in train.labels.iter().enumerate() {
            p[[i, y]] -= 1.0;
        }
        p /= n;
        let gw2 = h.t().dot(&p);
        let gb2 = p.sum_axis(Axis(0));
        let mut gh = p.dot(&w2.t());
        gh.zip_mut_with(&h, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let gw1 = xtr.t().dot(&gh);
        let gb1 = gh.sum_axis(Axis(0));
        let lr = 0.05;
        w1.scaled_add(-lr, &gw1);
        b1.scaled_add(-lr, &gb1);
        w2.scaled_add(-lr, &gw2);
        b2.scaled_add(-lr, &gb2);
    }
    let (_, p) = forward(&xte, &w1, &b1, &w2, &b2);
    let correct = p
        .outer_iter()
        .zip(&test.labels)
        .filter(|(row, &y)| (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() == y)
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.25, "raw-pixel probe accuracy {acc}");
}

/// The encoder trained with the true labels as clusters, then probed linearly.
#[test]
fn supervised_tiny_cnn_exceeds_point_nine_five() {
    let corpus = make_synthetic(4, 64, 32, 0).unwrap();
    let spec = SplitSpec {
        pretrain_fraction: 0.5,
        finetune_fraction: 0.25,
        test_fraction: 0.25,
        seed: 0,
    };
    let (train, ft, test) = split(&corpus, &spec).unwrap();
    let cfg = PretrainConfig::desk();
    let mut encoder = Encoder::<f32>::new(cfg.model.clone(), 0).unwrap();
    let labels: Vec<i32> = train.labels.iter().map(|&l| l as i32 + 1).collect();
    let assignment = ClusterAssignment::from_labels(labels.clone()).unwrap();
    let sgd = Sgd {
        lr: cfg.train.learning_rate,
        momentum: 0.9,
        weight_decay: cfg.train.weight_decay,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<&Image> = train.images.iter().collect();
    for _ in 0..3 {
        let clean = encoder.encode(&all).unwrap();
        let mut bank = CentroidBank::init_from(&centroids(&clean, &assignment).unwrap(), 0.1, 0).unwrap();
        for _ in 0..50 {
            let mut picks = Vec::new();
            for members in &assignment.members {
                picks.extend(members.choose_multiple(&mut rng, 4).copied());
            }
            let views: Vec<Image> = picks
                .iter()
                .map(|&i| augment::apply(&train.images[i], &cfg.augment, &mut rng).unwrap())
                .collect();
            let refs: Vec<&Image> = views.iter().collect();
            let batch_labels: Vec<i32> = picks.iter().map(|&i| labels[i]).collect();
            let (emb, tape) = encoder.forward_train(&refs).unwrap();
            let (_, grads) = batch_mlnce(&emb, &batch_labels, &bank, &LossConfig::default()).unwrap();
            zero_grad(&mut encoder);
            encoder.backward(tape, &grads).unwrap();
            sgd.step(&mut encoder);
            bank.update_batch(&emb, &batch_labels, UpdateRule::Sequential).unwrap();
        }
    }
    let (head, _) = finetune(&encoder, &ft, &FinetuneConfig::default()).unwrap();
    let acc = evaluate(&encoder, &head, &test, None, F1Mode::default()).unwrap().acc;
    assert!(acc > 0.95, "supervised encoder accuracy {acc}");
}

#[test]
fn split_example_sizes_and_determinism() {
    let images: Vec<Image> = (0..100).map(|_| Image::zeros((3, 4, 4))).collect();
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let set = LabeledImageSet::new(images, labels, vec!["a".into(), "b".into()]).unwrap();
    let spec = SplitSpec {
        pretrain_fraction: 0.8,
        finetune_fraction: 0.15,
        test_fraction: 0.05,
        seed: 7,
    };
    let (p, f, t) = split(&set, &spec).unwrap();
    assert_eq!((p.len(), f.len(), t.len()), (80, 15, 5));
    assert!(p.labels_hidden && !f.labels_hidden && !t.labels_hidden);
    let (p2, f2, t2) = split(&set, &spec).unwrap();
    assert_eq!(p.source_indices, p2.source_indices);
    assert_eq!(f.source_indices, f2.source_indices);
    assert_eq!(t.source_indices, t2.source_indices);

    let mut all: Vec<usize> = [p.source_indices, f.source_indices, t.source_indices].concat();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());

    let bad = SplitSpec {
        finetune_fraction: 0.8,
        ..spec
    };
    assert!(matches!(split(&set, &bad), Err(Error::Config(_))));
}
