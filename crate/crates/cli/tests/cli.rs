//! End-to-end runs of the `stgformer` binary.

use std::path::Path;
use std::process::{Command, Output};

const RUN: &str = r#"
schema_version = 1
seed = 3
out_dir = "out"
[data]
train = ["scenes/train"]
test = ["scenes/test"]
[model]
embed_dim = 4
width = 8
heads = 2
ff_width = 16
[train]
epochs = 2
[predict]
k = 3
"#;

fn stgformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgformer"))
        .current_dir(dir)
        .env_remove("STGFORMER_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) {
    for (split, seed) in [("train", "0"), ("test", "40")] {
        let target = format!("scenes/{split}");
        ok(stgformer(
            dir,
            &["synth", "--scenario", "crossing", "--agents", "3", "--seed", seed, "--count", "2", "--out", &target],
        ));
    }
    std::fs::write(dir.join("run.toml"), RUN).unwrap();
}

#[test]
fn synth_train_predict_eval_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(stgformer(dir, &["train", "-c", "run.toml"]));
    assert!(dir.join("out/model.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(dir.join("out/metrics.jsonl")).unwrap().lines().count(), 2);

    ok(stgformer(dir, &["predict", "-c", "run.toml", "--checkpoint", "out/model.ckpt"]));
    for f in ["predictions.csv", "ground_truth.csv", "graphs.csv"] {
        assert!(dir.join("out").join(f).is_file(), "{f}");
    }

    let table = ok(stgformer(
        dir,
        &["eval", "-c", "run.toml", "--predictions", "out/predictions.csv", "--ground-truth", "out/ground_truth.csv"],
    ));
    assert!(table.contains("AVG"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap();
    assert!(report["schema_version"].is_u64());

    ok(stgformer(dir, &["analyze", "--dumps", "out", "--out", "analysis", "--latest-step"]));
    for f in ["distance_hist.csv", "flip_events.csv", "summary.json"] {
        assert!(dir.join("analysis").join(f).is_file(), "{f}");
    }
}

#[test]
fn no_g_logs_zero_graph_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(stgformer(dir, &["train", "-c", "run.toml", "--ablation", "no_g"]));
    let log = std::fs::read_to_string(dir.join("out/metrics.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_kl"].as_f64(), Some(0.0), "{line}");
        assert_eq!(v["l_sparsity"].as_f64(), Some(0.0), "{line}");
        assert!(v["l_mse"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn mismatched_ground_truth_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(stgformer(dir, &["train", "-c", "run.toml"]));
    ok(stgformer(dir, &["predict", "-c", "run.toml", "--checkpoint", "out/model.ckpt"]));
    let gt = std::fs::read_to_string(dir.join("out/ground_truth.csv")).unwrap();
    let first = gt.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let kept: Vec<&str> = gt.lines().filter(|l| l.starts_with("window_id") || l.starts_with(&format!("{first},"))).collect();
    std::fs::write(dir.join("one_window.csv"), kept.join("\n") + "\n").unwrap();
    let out = stgformer(
        dir,
        &["eval", "-c", "run.toml", "--predictions", "out/predictions.csv", "--ground-truth", "one_window.csv"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[shape]"));

    let mut lines: Vec<&str> = gt.lines().collect();
    lines.truncate(lines.len() / 2);
    std::fs::write(dir.join("short.csv"), lines.join("\n") + "\n").unwrap();
    let out = stgformer(
        dir,
        &["eval", "-c", "run.toml", "--predictions", "out/predictions.csv", "--ground-truth", "short.csv"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "schema_version = 1\n[model]\nheads = 3\nwidth = 8\n").unwrap();
    let out = stgformer(dir, &["train", "-c", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_ablation_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stgformer(tmp.path(), &["train", "--ablation", "no_such_thing"]);
    assert_eq!(out.status.code(), Some(2));
}
