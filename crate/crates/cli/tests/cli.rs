use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn epcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epcl"))
        .args(args)
        .env("EPCL_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = epcl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_small(dir: &Path) {
    ok(&["synth", "--out", s(dir), "--n", "4", "--shape", "16,16,16", "--seed", "3", "--labeled-frac", "0.25", "--n-test", "1"]);
}

fn write_config(dir: &Path, data: &Path, out: &Path, iters: usize) -> PathBuf {
    let path = dir.join("train.toml");
    let text = format!(
        "preset = \"tiny\"\ntotal_iters = {iters}\npatch_size = [8, 8, 8]\ninfer_stride = [4, 4, 4]\n\
         checkpoint_every = 2\ndata_dir = \"{}\"\nout_dir = \"{}\"\n",
        data.display(),
        out.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn log_lines(out: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(out.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_splits_use_ceiling_and_repeat_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--n", "20", "--shape", "16,16,16", "--seed", "9", "--labeled-frac", "0.1"]);
    }
    let splits: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("splits.json")).unwrap()).unwrap();
    assert_eq!(splits["labeled"].as_array().unwrap().len(), 2);
    assert_eq!(splits["unlabeled"].as_array().unwrap().len(), 18);
    for sub in ["images/case_007.bin", "labels/case_019.bin", "splits.json"] {
        assert_eq!(std::fs::read(a.join(sub)).unwrap(), std::fs::read(b.join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(epcl(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(epcl(&["synth", "--out", out, "--shape", "16,16"]).status.code(), Some(2));
    assert_eq!(epcl(&["synth", "--out", out, "--labeled-frac", "1.5"]).status.code(), Some(2));
    let bad = epcl(&["train", "--override", "no_such_key=1"]);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("combination_mode") && err.contains("reliability_mode"), "{err}");
    assert_eq!(epcl(&["train", "--override", "combination_mode=nope"]).status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.epcl");
    let out = epcl(&["predict", "--checkpoint", s(&missing), "--in", s(&missing), "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_eval_predict_uq_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth_small(&data);
    let config = write_config(tmp.path(), &data, &run, 3);
    let stdout = ok(&["train", "--config", s(&config), "--override", "combination_mode=concat"]);
    assert!(stdout.contains("iteration 3"), "{stdout}");
    let ckpt = run.join("final.epcl");
    assert!(ckpt.exists() && run.join("ckpt_000002.epcl").exists());
    assert!(std::fs::read_to_string(run.join("config.toml")).unwrap().contains("combination_mode = \"concat\""));
    assert_eq!(log_lines(&run).len(), 3);

    let csv = tmp.path().join("metrics.csv");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");

    // Ground truth scored against itself.
    let gt_csv = tmp.path().join("gt.csv");
    ok(&["eval", "--predictions", s(&data), "--data", s(&data), "--out", s(&gt_csv)]);
    for line in std::fs::read_to_string(&gt_csv).unwrap().lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("100.0000"), "{line}");
    }

    let input = data.join("images/case_003.json");
    let pred = tmp.path().join("pred/case_003.json");
    ok(&["predict", "--checkpoint", s(&ckpt), "--in", s(&input), "--out", s(&pred)]);
    for f in ["case_003.json", "case_003.bin", "case_003_prob0.json", "case_003_prob1.bin"] {
        assert!(tmp.path().join("pred").join(f).exists(), "{f}");
    }

    let report = tmp.path().join("uq");
    ok(&["uq-report", "--checkpoint", s(&ckpt), "--in", s(&input), "--out", s(&report)]);
    let count = |d: &str| std::fs::read_dir(report.join(d)).unwrap().count();
    assert_eq!(count("entropy"), 16);
    assert_eq!(count("juq"), 16);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["reliability_mode"], "verbatim");
    assert!(summary["juq"]["spatial_variance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn reliability_override_leaves_labeled_losses_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let mut firsts = Vec::new();
    for mode in ["verbatim", "minmax"] {
        let run = tmp.path().join(mode);
        let config = write_config(tmp.path(), &data, &run, 1);
        ok(&["train", "--config", s(&config), "--override", &format!("reliability_mode={mode}")]);
        firsts.push(log_lines(&run).remove(0));
    }
    for key in ["l_ce", "l_dice", "l_focal", "l_iou", "l_fused", "l_seg"] {
        assert_eq!(firsts[0][key], firsts[1][key], "{key}");
    }
}

#[test]
fn non_finite_loss_exits_1_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth_small(&data);
    let config = write_config(tmp.path(), &data, &run, 6);
    let out = epcl(&["train", "--config", s(&config), "--override", "lr=1e30"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite") && err.contains("diagnostics_"), "{err}");
}
