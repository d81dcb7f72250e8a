use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cmcrl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cmcrl"));
    c.env_remove("CMCRL_OUTPUT_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    cmcrl().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("error")).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {text}");
    lines[0].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn synthetic(dir: &Path, per_class: &str) {
    ok(&["make-synthetic", "--classes", "4", "--per-class", per_class, "--size", "32", "--seed", "0", "--out", s(dir)]);
}

/// Desk preset shrunk to a couple of steps.
const QUICK: [&str; 10] = [
    "--preset",
    "desk",
    "--set",
    "train.epochs=2",
    "--set",
    "train.iterations=3",
    "--set",
    "model.stage_widths=[4, 8, 8, 16]",
    "--set",
    "cluster.k1=10",
];

#[test]
fn make_synthetic_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let stdout = ok(&["make-synthetic", "--classes", "4", "--per-class", "64", "--size", "32", "--seed", "0", "--out", s(&a)]);
    assert!(stdout.contains("N=256 K=4"), "{stdout}");
    let dirs: Vec<_> = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(dirs.len(), 4);
    let pngs: Vec<_> = files_under(&a).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(pngs.len(), 256);

    ok(&["make-synthetic", "--classes", "4", "--per-class", "64", "--size", "32", "--seed", "0", "--out", s(&b)]);
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }

    // same directory again: refused, then accepted with --force
    let out = run(&["make-synthetic", "--classes", "4", "--per-class", "64", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("--force"));
    ok(&["make-synthetic", "--classes", "2", "--per-class", "8", "--out", s(&a), "--force"]);
    assert_eq!(files_under(&a).len(), 17);
}

#[test]
fn single_class_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["make-synthetic", "--classes", "1", "--per-class", "64", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synthetic(&corpus, "64");
    let (pre, ft, ev, cr) = (
        tmp.path().join("pre"),
        tmp.path().join("ft"),
        tmp.path().join("eval"),
        tmp.path().join("clusters"),
    );
    let c = s(&corpus);
    let stdout = ok(&["pretrain", "--preset", "desk", "--corpus", c, "--out", s(&pre)]);
    assert!(stdout.contains("epochs=5"), "{stdout}");
    let ck = pre.join("checkpoint");
    ok(&["finetune", "--preset", "desk", "--corpus", c, "--checkpoint", s(&ck), "--out", s(&ft)]);
    let stdout = ok(&[
        "evaluate", "--preset", "desk", "--corpus", c, "--checkpoint", s(&ck), "--head", s(&ft.join("head")), "--out", s(&ev),
    ]);
    assert!(stdout.starts_with("acc="), "{stdout}");
    ok(&["cluster-report", "--preset", "desk", "--corpus", c, "--checkpoint", s(&ck), "--out", s(&cr)]);

    for (dir, files) in [
        (&pre, &["config.toml", "epochs.csv", "checkpoint/manifest.txt", "checkpoint/params.bin"][..]),
        (&ft, &["config.toml", "finetune.csv", "head/manifest.txt", "head/params.bin"][..]),
        (&ev, &["config.toml", "metrics.txt", "metrics.csv", "confusion.csv"][..]),
        (&cr, &["config.toml", "cluster_composition.csv", "cluster_composition.png", "cluster_summary.txt"][..]),
    ] {
        for f in files {
            assert!(dir.join(f).is_file(), "missing {}", dir.join(f).display());
        }
    }
    let epochs = fs::read_to_string(pre.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 6);
    assert!(epochs.starts_with("epoch,m,n_c,loss,cacc,ari,wall_time,layer_set"));
    let metrics = fs::read_to_string(ev.join("metrics.txt")).unwrap();
    let acc: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("acc = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc > 0.5, "pipeline accuracy {acc}");
    let confusion = fs::read_to_string(ev.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 5);
    let png = image::open(cr.join("cluster_composition.png")).unwrap();
    assert!(png.width() > 0 && png.height() > 0);
    let composition = fs::read_to_string(cr.join("cluster_composition.csv")).unwrap();
    assert!(composition.starts_with("cluster,size,majority_class,purity,class_00"), "{composition}");
}

#[test]
fn echoed_config_reproduces_a_deterministic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synthetic(&corpus, "16");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args: Vec<&str> = vec!["pretrain", "--corpus", s(&corpus), "--deterministic", "--out", s(&a)];
    args.extend(QUICK);
    ok(&args);
    let echoed = a.join("config.toml");
    ok(&["pretrain", "--config", s(&echoed), "--out", s(&b)]);
    assert_eq!(fs::read_to_string(&echoed).unwrap(), fs::read_to_string(b.join("config.toml")).unwrap());
    let losses = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("epochs.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').nth(3).unwrap().to_string())
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(fs::read(a.join("checkpoint/params.bin")).unwrap(), fs::read(b.join("checkpoint/params.bin")).unwrap());
}

#[test]
fn layer_set_flag_reaches_the_epoch_log() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synthetic(&corpus, "16");
    for (layers, dir, want) in [("4", "only", "\"4\""), ("1,2,3,4", "all", "\"1,2,3,4\"")] {
        let out = tmp.path().join(dir);
        let mut args: Vec<&str> = vec!["pretrain", "--corpus", s(&corpus), "--layers", layers, "--out", s(&out)];
        args.extend(QUICK);
        ok(&args);
        let csv = fs::read_to_string(out.join("epochs.csv")).unwrap();
        for row in csv.lines().skip(1) {
            assert!(row.ends_with(want), "{row}");
        }
        let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(cfg.contains(&format!("layers = \"{layers}\"")), "{cfg}");
    }
}

#[test]
fn architecture_mismatch_is_a_manifest_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synthetic(&corpus, "16");
    let pre = tmp.path().join("pre");
    let mut args: Vec<&str> = vec!["pretrain", "--corpus", s(&corpus), "--set", "model.embedding_dim=512", "--out", s(&pre)];
    args.extend(QUICK);
    ok(&args);
    let ck = pre.join("checkpoint");
    let mut args: Vec<&str> = vec![
        "evaluate", "--corpus", s(&corpus), "--checkpoint", s(&ck), "--head", s(&ck), "--set", "model.embedding_dim=256",
    ];
    args.extend(QUICK);
    let ev = tmp.path().join("eval");
    args.extend(["--out", s(&ev)]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[manifest_mismatch]"), "{line}");
    assert!(line.contains("model.embedding_dim: checkpoint=512 config=256"), "{line}");
    assert!(!ev.exists());
}

#[test]
fn missing_checkpoint_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = run(&["finetune", "--corpus", s(tmp.path()), "--checkpoint", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[not_found]"), "{line}");
    assert!(line.contains(s(&missing.join("manifest.txt"))), "{line}");
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[train]\nepochs = 2\nmomentum_typo = 0.5\n").unwrap();
    let out = run(&["pretrain", "--config", s(&cfg), "--corpus", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("momentum_typo"));
}

#[test]
fn output_root_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let out = cmcrl()
        .args(["make-synthetic", "--classes", "2", "--per-class", "8", "--out", "syn"])
        .env("CMCRL_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("syn").join("config.toml").is_file());
    assert_eq!(files_under(&root.join("syn")).len(), 17);
}
