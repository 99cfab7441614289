use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priorseg_core::data_io::load_case;

fn priorseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PRIORSEG_DEVICE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path → file bytes for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, cases: &str, size: &str, seed: &str, slices: &str) -> Output {
    priorseg(&["synth", "--out", p(dir), "--cases", cases, "--size", size, "--seed", seed, "--slices", slices])
}

fn small_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            "# small test run\n\
             data.root = {}\n\
             train.epochs = 2\n\
             train.batch_size = 4\n\
             train.lr_start = 1e-3\n\
             train.lr_end = 1e-4\n\
             train.out_dir = {}\n\
             model.encoder_depth = 2\n\
             model.base_channels = 4\n\
             model.weight_channels = 2\n\
             {extra}\n",
            p(data),
            p(&dir.join("run"))
        ),
    )
    .unwrap();
    path
}

#[test]
fn synth_writes_cases_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    assert_eq!(code(&synth(&a, "10", "64", "1", "2")), 0);
    assert_eq!(code(&synth(&b, "10", "64", "1", "2")), 0);
    let dirs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(dirs.len(), 10);
    assert!(a.join("manifest.json").is_file());
    assert_eq!(snapshot(&a), snapshot(&b));
    // Rerunning into the same directory leaves identical bytes.
    let before = snapshot(&a);
    assert_eq!(code(&synth(&a, "10", "64", "1", "2")), 0);
    assert_eq!(snapshot(&a), before);
}

#[test]
fn synth_rejects_zero_cases() {
    let t = tempfile::tempdir().unwrap();
    let o = synth(&t.path().join("x"), "0", "64", "1", "2");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cases must be ≥ 1"), "{}", stderr(&o));
    assert!(!t.path().join("x").exists(), "no side effect on validation failure");
}

#[test]
fn synth_unwritable_path_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("file");
    fs::write(&file, "x").unwrap();
    let o = synth(&file.join("sub"), "1", "32", "1", "1");
    assert_eq!(code(&o), 2);
}

#[test]
fn indivisible_size_warns_then_training_fails_fast() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    let o = Command::new(env!("CARGO_BIN_EXE_priorseg"))
        .args(["synth", "--out", p(&data), "--cases", "2", "--size", "63", "--seed", "3", "--slices", "2"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("not divisible"), "{}", stderr(&o));
    let cfg = small_config(t.path(), &data, "");
    let o = priorseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not divisible"), "{}", stderr(&o));
}

#[test]
fn preview_mixup_counts_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "3", "32", "2", "3")), 0);
    let a = t.path().join("pa");
    let b = t.path().join("pb");
    assert_eq!(code(&priorseg(&["preview-mixup", "--data", p(&data), "--n", "3", "--out", p(&a), "--seed", "5"])), 0);
    assert_eq!(code(&priorseg(&["preview-mixup", "--data", p(&data), "--n", "3", "--out", p(&b), "--seed", "5"])), 0);
    let sa = snapshot(&a);
    assert_eq!(sa.len(), 3);
    assert!(sa.keys().all(|k| k.extension().is_some_and(|e| e == "png")));
    assert_eq!(sa, snapshot(&b));
    for (name, _) in sa {
        let png = priorseg_core::render::read_png(&a.join(&name)).unwrap();
        let lambda = png.text.iter().find(|(k, _)| k == "lambda").expect("lambda annotated");
        let v: f64 = lambda.1.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!(name.to_string_lossy().contains("lambda"));
    }
}

#[test]
fn preview_mixup_needs_a_pair() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "1", "32", "2", "1")), 0);
    let o = priorseg(&["preview-mixup", "--data", p(&data), "--n", "1", "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let o = priorseg(&["preview-mixup", "--data", p(&t.path().join("missing")), "--n", "1", "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_predict_resume_roundtrip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "3", "32", "4", "4")), 0);
    let cfg = small_config(t.path(), &data, "");
    let o = priorseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = t.path().join("run");
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for (i, line) in log.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i);
        for key in ["losses", "lr", "val_dice", "wall_time"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    assert!(run.join("ckpt_epoch_2").is_file());
    assert!(run.join("ckpt_best").is_file());

    // eval
    let ev = t.path().join("ev");
    let o = priorseg(&["eval", "--ckpt", p(&run.join("ckpt_epoch_2")), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    for c in report[0]["classes"].as_array().unwrap() {
        if let Some(m) = c["mean"].as_f64() {
            assert!((0.0..=1.0).contains(&m));
        }
    }
    let md = fs::read_to_string(ev.join("report.md")).unwrap();
    assert!(md.contains("| Method | LV | Myo | Inf | NoR |"));

    // predict
    let pr = t.path().join("pr");
    let o = priorseg(&["predict", "--ckpt", p(&run.join("ckpt_best")), "--data", p(&data), "--out", p(&pr)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = snapshot(&pr);
    let niftis: Vec<_> = files.keys().filter(|k| k.to_string_lossy().ends_with("_pred.nii.gz")).collect();
    assert_eq!(niftis.len(), 12);
    assert_eq!(files.keys().filter(|k| k.to_string_lossy().ends_with(".png")).count(), 12);
    for n in niftis {
        let path = pr.join(n);
        let case = load_case(&path, &path).unwrap();
        assert!(case.labels.iter().all(|&l| l <= 4));
    }

    // resume from epoch 1 of a 2-epoch run replays epoch 2 identically
    let mut cfg1 = fs::read_to_string(&cfg).unwrap();
    cfg1.push_str("train.checkpoint_every = 1\n");
    fs::write(&cfg, &cfg1).unwrap();
    let o = priorseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let o = priorseg(&["train", "--config", p(&cfg), "--resume", p(&run.join("ckpt_epoch_1"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let losses = |s: &str| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["losses"].clone())
            .collect()
    };
    assert_eq!(losses(&full), losses(&resumed));
}

#[test]
fn resume_with_other_model_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "2", "32", "4", "2")), 0);
    let cfg = small_config(t.path(), &data, "train.epochs = 1");
    let cfg_text = fs::read_to_string(&cfg).unwrap().replace("train.epochs = 2\n", "");
    fs::write(&cfg, &cfg_text).unwrap();
    assert_eq!(code(&priorseg(&["train", "--config", p(&cfg)])), 0);
    fs::write(&cfg, cfg_text.replace("model.base_channels = 4", "model.base_channels = 8")).unwrap();
    let o = priorseg(&["train", "--config", p(&cfg), "--resume", p(&t.path().join("run/ckpt_epoch_1"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint/config mismatch"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "train.epochs = 2\ntrian.lr = 0.1\n").unwrap();
    let o = priorseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("trian.lr"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_three() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "2", "32", "4", "2")), 0);
    let cfg = small_config(t.path(), &data, "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("train.lr_start = 1e-3", "train.lr_start = 1e200")
        .replace("train.lr_end = 1e-4", "train.lr_end = 1e200");
    fs::write(&cfg, text).unwrap();
    let o = priorseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_and_bad_device() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "1", "32", "4", "2")), 0);
    let o = priorseg(&["eval", "--ckpt", p(&t.path().join("nope")), "--data", p(&data), "--out", p(&t.path().join("e"))]);
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_priorseg"))
        .args(["synth", "--out", p(&t.path().join("x")), "--cases", "1"])
        .env("PRIORSEG_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("PRIORSEG_DEVICE"));
}

#[test]
fn ablation_single_variant_row() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&synth(&data, "2", "32", "4", "3")), 0);
    let cfg = small_config(t.path(), &data, "");
    let out = t.path().join("ab");
    let o = priorseg(&[
        "ablation", "--data", p(&data), "--out", p(&out), "--config", p(&cfg), "--variants", "baseline", "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    let table: Vec<&str> = md
        .split("## Reference")
        .next()
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("| "))
        .collect();
    assert_eq!(table.len(), 2, "{md}");
    assert!(table[1].starts_with("| baseline |"));
    let o = priorseg(&["ablation", "--data", p(&data), "--out", p(&out), "--variants", "nonsense"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn default_config_template_parses_back() {
    let o = priorseg(&["default-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("train.lr_start = 1e-2"));
    assert!(text.contains("train.batch_size = 16"));
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.cfg");
    fs::write(&cfg, text).unwrap();
    // No data.root: parses, then fails for the missing dataset only.
    let o = priorseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.root"), "{}", stderr(&o));
}
