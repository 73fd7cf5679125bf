use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "epochs = 2\npretrain_epochs = 2\ntrain_per_class = 20\ntest_per_class = 10\nnum_classes = 4\n";

fn prop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn prop")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "unknown.txt", "no_such_key = 1\n");
    write(d, "invalid.txt", "prompt_len = 0\n");
    write(d, "garbled.txt", "epochs 3\n");
    for name in ["unknown.txt", "invalid.txt", "garbled.txt"] {
        assert_eq!(code(&prop(d, &["run", "--config", name])), 2, "{name}");
    }
    assert_eq!(code(&prop(d, &["run", "--config", "missing.txt"])), 2);
    assert_eq!(code(&prop(d, &["run", "--synthetic", "--data-dir", "."])), 2);
}

#[test]
fn overlapping_pretrain_classes_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "small.txt", SMALL);
    let o = prop(d, &["pretrain", "--config", "small.txt", "--out-dir", "bb"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("bb/backbone.ckpt").exists() && d.join("bb/manifest.txt").exists());

    // Same data with fewer held-out classes: two base classes join the stream.
    write(d, "overlap.txt", &format!("{SMALL}num_classes = 6\nbase_classes = 3\n"));
    let o = prop(d, &["run", "--config", "overlap.txt", "--checkpoint", "bb/backbone.ckpt"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let o = prop(d, &["run", "--config", "small.txt", "--checkpoint", "bb/backbone.ckpt", "--out-dir", "ok"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "small.txt", SMALL);
    for out in ["a", "b"] {
        let o = prop(d, &["run", "--config", "small.txt", "--seed", "7", "--out-dir", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["metrics.csv", "manifest.txt", "prop.ckpt"] {
        let a = std::fs::read(d.join("a").join(name)).unwrap();
        let b = std::fs::read(d.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let ckpt = std::fs::read(d.join("a/prop.ckpt")).unwrap();
    assert_eq!(&ckpt[..8], b"PROPCKPT");
    let manifest = std::fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 7"));
    let metrics = std::fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,last,avg,task_0,task_1\n"));
    assert_eq!(metrics.lines().count(), 3);

    let o = prop(d, &["export-embeddings", "--config", "small.txt", "--seed", "7", "--checkpoint", "a/prop.ckpt", "--out-dir", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let emb = std::fs::read_to_string(d.join("a/embeddings.csv")).unwrap();
    assert!(emb.starts_with("x,y,label,kind\n"));
    assert_eq!(emb.lines().filter(|l| l.ends_with(",prototype")).count(), 4);
}

#[test]
fn baselines_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "small.txt", SMALL);
    for (m, ckpt) in [("finetune", true), ("kv", true), ("ncm", false)] {
        let o = prop(d, &["baseline", m, "--config", "small.txt", "--out-dir", m]);
        assert_eq!(code(&o), 0, "{m}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(d.join(m).join("metrics.csv").exists());
        assert_eq!(d.join(m).join(format!("{m}.ckpt")).exists(), ckpt, "{m}");
    }
    let o = prop(d, &["profile", "--config", "small.txt", "--tasks", "1,2", "--out-dir", "p"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(d.join("p/profile.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn csv_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 3 classes on a 4-d grid; the highest class is held out for pretraining.
    let mut csv = String::new();
    for c in 0..3 {
        for i in 0..12 {
            let v: Vec<String> = (0..4).map(|j| format!("{}", if j == c { 8.0 } else { 0.0 } + (i * 7 + j) as f64 % 3.0 / 3.0)).collect();
            csv.push_str(&format!("{},{c}\n", v.join(",")));
        }
    }
    std::fs::create_dir(d.join("data")).unwrap();
    write(&d.join("data"), "data.csv", &csv);
    write(
        d,
        "c.txt",
        "input_dim = 4\nbase_classes = 1\ninit_classes = 2\ninc_classes = 2\ntest_per_class = 4\nepochs = 2\npretrain_epochs = 2\n",
    );
    let o = prop(d, &["run", "--config", "c.txt", "--data-dir", "data", "--out-dir", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let wrong_dim = prop(d, &["run", "--data-dir", "data"]);
    assert_eq!(code(&wrong_dim), 2);
}
