use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use toml::Value;

use cmcrl_core::checkpoint::{self, Checkpoint};
use cmcrl_core::cluster::{pseudo_label, ClusterAssignment};
use cmcrl_core::data::{self, load_corpus, split, Image, LabeledImageSet};
use cmcrl_core::metrics::{ari, cacc};
use cmcrl_core::train::{
    epoch_csv, evaluate as evaluate_metrics, finetune as fit_head, finetune_csv, head_from_checkpoint,
    head_to_checkpoint, PretrainConfig, TrainState,
};
use cmcrl_core::Error;

use crate::config::{ConfigFile, CONFIG_FILE};
use crate::plot;
use crate::{ClusterReportArgs, ConfigArgs, EvaluateArgs, FinetuneArgs, MakeSyntheticArgs, OutputArgs, PretrainArgs};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HEAD_DIR: &str = "head";

fn resolve(args: &ConfigArgs, extra: Vec<(String, Value)>) -> Result<ConfigFile> {
    let mut overrides = Vec::new();
    if let Some(c) = &args.corpus {
        overrides.push(("data.corpus".to_string(), Value::String(c.display().to_string())));
    }
    overrides.extend(args.set.iter().cloned());
    overrides.extend(extra);
    ConfigFile::resolve(args.preset, args.config.as_deref(), &overrides)
}

/// Resolves `--out` against the output root and makes sure it can be written.
fn prepare_out(args: &OutputArgs, cfg_root: Option<&Path>) -> Result<PathBuf> {
    let root = args.output_root.as_deref().or(cfg_root);
    let out = match root {
        Some(r) if args.out.is_relative() => r.join(&args.out),
        _ => args.out.clone(),
    };
    if out.exists() {
        if !out.is_dir() {
            bail!("output path {} exists and is not a directory", out.display());
        }
        let nonempty = fs::read_dir(&out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if nonempty && !args.force {
            bail!("output directory {} is not empty; pass --force to write into it", out.display());
        }
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_splits(cfg: &ConfigFile) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    let root = cfg
        .data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("no corpus given (--corpus or data.corpus)".into()))?;
    let corpus = load_corpus(root, cfg.data.image_size)?;
    info!(
        "corpus {}: {} images, {} classes",
        root.display(),
        corpus.len(),
        corpus.num_classes()
    );
    Ok(split(&corpus, &cfg.data.split_spec())?)
}

fn load_state(config: PretrainConfig, dir: &Path) -> Result<TrainState<f32>> {
    checkpoint::require(dir)?;
    let ck = Checkpoint::load(dir)?;
    Ok(TrainState::from_checkpoint(config, &ck)?)
}

pub fn make_synthetic(args: &MakeSyntheticArgs) -> Result<()> {
    let out = prepare_out(&args.output, None)?;
    if args.output.force {
        // stale class folders from an earlier run would become extra classes
        for entry in fs::read_dir(&out)? {
            let p = entry?.path();
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let set = data::make_synthetic(args.classes as usize, args.per_class as usize, args.size as usize, args.seed)?;
    set.export(&out)?;
    write(
        &out.join(CONFIG_FILE),
        format!(
            "[synthetic]\nclasses = {}\nper_class = {}\nsize = {}\nseed = {}\n",
            args.classes, args.per_class, args.size, args.seed
        ),
    )?;
    println!("N={} K={} out={}", set.len(), set.num_classes(), out.display());
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(l) = &args.layers {
        extra.push(("model.layers".to_string(), Value::String(l.clone())));
        extra.push(("loss.layers".to_string(), Value::String(l.clone())));
    }
    let int = |v: u64| i64::try_from(v).map(Value::Integer).map_err(|_| anyhow!("{v} is too large"));
    if let Some(v) = args.epochs {
        extra.push(("train.epochs".into(), int(v as u64)?));
    }
    if let Some(v) = args.iterations {
        extra.push(("train.iterations".into(), int(v as u64)?));
    }
    if let Some(v) = args.seed {
        extra.push(("train.seed".into(), int(v)?));
    }
    if let Some(v) = args.lr {
        extra.push(("train.learning_rate".into(), Value::Float(v)));
    }
    if args.deterministic {
        extra.push(("train.deterministic".into(), Value::Boolean(true)));
    }
    let cfg = resolve(&args.config, extra)?;
    let (pre, _, _) = load_splits(&cfg)?;
    let mut state = match &args.resume {
        Some(dir) => load_state(cfg.pretrain_config(), dir)?,
        None => TrainState::new(cfg.pretrain_config())?,
    };
    let out = prepare_out(&args.output, cfg.output.root.as_deref())?;
    cfg.write_to(&out)?;
    let csv_path = out.join("epochs.csv");
    let every = cfg.train.checkpoint_every;
    let io = |path: &Path, e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    state.train_until(&pre, cfg.train.epochs, |s| {
        fs::write(&csv_path, epoch_csv(&s.history)).map_err(|e| io(&csv_path, e))?;
        if every > 0 && s.epoch % every == 0 && s.epoch < cfg.train.epochs {
            s.to_checkpoint().save(&out.join("checkpoints").join(format!("epoch_{:04}", s.epoch)))?;
        }
        Ok(())
    })?;
    write(&csv_path, epoch_csv(&state.history))?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    state.to_checkpoint().save(&ck_dir)?;
    let last = state.history.last();
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.4}"));
    println!(
        "epochs={} clusters={} loss={} cacc={} checkpoint={}",
        state.epoch,
        last.map_or(0, |r| r.clusters),
        fmt(last.and_then(|r| r.loss)),
        fmt(last.and_then(|r| r.cacc)),
        ck_dir.display()
    );
    Ok(())
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = resolve(&args.config, Vec::new())?;
    let state = load_state(cfg.pretrain_config(), &args.checkpoint)?;
    let (_, ft, _) = load_splits(&cfg)?;
    if ft.is_empty() {
        return Err(Error::Config("the fine-tune split is empty (data.finetune_fraction)".into()).into());
    }
    let out = prepare_out(&args.output, cfg.output.root.as_deref())?;
    cfg.write_to(&out)?;
    let before = state.encoder.checksum();
    let (head, log) = fit_head(&state.encoder, &ft, &cfg.train.finetune)?;
    if state.encoder.checksum() != before {
        return Err(Error::Contract("encoder parameters changed during fine-tuning".into()).into());
    }
    let mut ck = Checkpoint::default();
    ck.manifest.extend(cfg.pretrain_config().architecture_manifest());
    ck.set("format", "cmcrl-head-1");
    ck.set("encoder.checksum", format!("{before:016x}"));
    for (i, name) in ft.class_names.iter().enumerate() {
        ck.set(format!("class.{i}"), name);
    }
    head_to_checkpoint(&head, &mut ck);
    let head_dir = out.join(HEAD_DIR);
    ck.save(&head_dir)?;
    write(&out.join("finetune.csv"), finetune_csv(&log))?;
    let last = log.last().expect("at least one fine-tune epoch");
    println!(
        "epochs={} loss={:.4} train_acc={:.4} head={}",
        last.epoch,
        last.loss,
        last.train_acc,
        head_dir.display()
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = resolve(&args.config, Vec::new())?;
    let pcfg = cfg.pretrain_config();
    let state = load_state(pcfg.clone(), &args.checkpoint)?;
    checkpoint::require(&args.head)?;
    let head_ck = Checkpoint::load(&args.head)?;
    head_ck.check_keys(&pcfg.architecture_manifest(), |k| k.starts_with("model."))?;
    let head = head_from_checkpoint::<f32>(&head_ck)?;
    if head.dim() != cfg.model.embedding_dim {
        return Err(Error::ManifestMismatch(format!(
            "head input dimension {} differs from model.embedding_dim {}",
            head.dim(),
            cfg.model.embedding_dim
        ))
        .into());
    }
    let (_, _, test) = load_splits(&cfg)?;
    let out = prepare_out(&args.output, cfg.output.root.as_deref())?;
    cfg.write_to(&out)?;
    let report = evaluate_metrics(&state.encoder, &head, &test, state.last_clustering.as_ref(), cfg.output.f1_mode)?;
    write(&out.join("metrics.txt"), report.to_key_value())?;
    write(&out.join("metrics.csv"), report.to_csv())?;
    write(&out.join("confusion.csv"), report.confusion_csv())?;
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.4}"));
    println!(
        "acc={:.4} recall={:.4} precision={:.4} f1={:.4} cacc={} ari={}",
        report.acc,
        report.recall,
        report.precision,
        report.f1,
        fmt(report.cacc),
        fmt(report.ari)
    );
    Ok(())
}

/// Per-cluster counts by true class; the last row collects noise.
fn composition(assignment: &ClusterAssignment, truth: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let m = assignment.num_clusters();
    let mut rows = vec![vec![0; classes]; m + 1];
    for (i, &l) in assignment.labels.iter().enumerate() {
        let r = assignment.cluster_index(i).unwrap_or(m);
        debug_assert!(l >= 1 || r == m);
        rows[r][truth[i]] += 1;
    }
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cluster_report(args: &ClusterReportArgs) -> Result<()> {
    let cfg = resolve(&args.config, Vec::new())?;
    let state = load_state(cfg.pretrain_config(), &args.checkpoint)?;
    let (pre, _, _) = load_splits(&cfg)?;
    let out = prepare_out(&args.output, cfg.output.root.as_deref())?;
    cfg.write_to(&out)?;
    let refs: Vec<&Image> = pre.images.iter().collect();
    let emb = state.encoder.encode(&refs)?;
    let assignment = pseudo_label(&emb, &cfg.cluster)?;
    let k = pre.num_classes();
    let rows = composition(&assignment, &pre.labels, k);
    let m = assignment.num_clusters();

    let mut csv = String::from("cluster,size,majority_class,purity");
    for name in &pre.class_names {
        csv.push(',');
        csv.push_str(&csv_field(name));
    }
    csv.push('\n');
    for (r, counts) in rows.iter().enumerate() {
        let size: usize = counts.iter().sum();
        if r == m && size == 0 {
            continue;
        }
        let id = if r == m { "noise".to_string() } else { (r + 1).to_string() };
        let (major, &top) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least two classes");
        let purity = if size == 0 { 0.0 } else { top as f64 / size as f64 };
        csv.push_str(&format!("{id},{size},{},{purity}", csv_field(&pre.class_names[major])));
        for c in counts {
            csv.push_str(&format!(",{c}"));
        }
        csv.push('\n');
    }
    write(&out.join("cluster_composition.csv"), csv)?;
    plot::stacked_bars(&rows, m).save(out.join("cluster_composition.png")).context("writing the bar chart")?;

    let fmt = |v: std::result::Result<f64, Error>| v.map_or("nan".to_string(), |x| format!("{x}"));
    let summary = format!(
        "clusters = {m}\nclustered = {}\nnoise = {}\ncacc = {}\nari = {}\n",
        assignment.num_clustered(),
        pre.len() - assignment.num_clustered(),
        fmt(cacc(&pre.labels, &assignment.labels)),
        fmt(ari(&pre.labels, &assignment.labels)),
    );
    write(&out.join("cluster_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
