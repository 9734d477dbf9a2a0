use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn cdro(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdro"))
        .args(args)
        .env("CDRO_OUTPUT_ROOT", root)
        .output()
        .expect("spawn cdro")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(root: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["generate", "--out", name];
    args.extend_from_slice(extra);
    ok(cdro(root, &args));
}

#[test]
fn generate_writes_one_row_per_instance_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let args = ["--preset", "idn-mid-r5", "--n", "2000", "--n-test", "100", "--seed", "4"];
    generate(root.path(), "a", &args);
    generate(root.path(), "b", &args);
    let rows = fs::read_to_string(root.path().join("a/annotations.csv")).unwrap().lines().count();
    assert_eq!(rows, 2001);
    for f in ["features.csv", "annotations.csv", "truth.csv", "manifest.json", "test/features.csv", "test/truth.csv"] {
        assert_eq!(
            fs::read(root.path().join("a").join(f)).unwrap(),
            fs::read(root.path().join("b").join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let manifest: Value = serde_json::from_slice(&fs::read(root.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["preset"], "idn-mid-r5");
}

#[test]
fn large_group_uses_every_annotator() {
    let root = tempfile::tempdir().unwrap();
    generate(root.path(), "g", &["--preset", "idn-high-r30", "--n", "3000", "--n-test", "10"]);
    let text = fs::read_to_string(root.path().join("g/annotations.csv")).unwrap();
    let ids: HashSet<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ids.len(), 30);
}

#[test]
fn train_with_baseline_writes_metrics_and_summary() {
    let root = tempfile::tempdir().unwrap();
    generate(root.path(), "d", &["--n", "500", "--n-test", "300", "--seed", "2"]);
    let start = Instant::now();
    ok(cdro(
        root.path(),
        &["train", "--data", root.path().join("d").to_str().unwrap(), "--warmup-epochs", "5", "--epochs", "15", "--baseline", "mv", "--out", "run"],
    ));
    assert!(start.elapsed() < Duration::from_secs(60));

    let run = root.path().join("run");
    let summary: Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    for key in ["adaptcdrp", "ce_mv"] {
        let acc = summary[key]["test_acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{key} {acc}");
    }
    assert!(summary.get("ce_em").is_none());

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let mut last = 0;
    let mut robust = 0;
    for line in metrics.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let epoch = rec["epoch"].as_u64().unwrap();
        assert!(epoch > last);
        last = epoch;
        if rec["phase"] == "robust" {
            robust += 1;
            assert!(rec["gamma_a"].as_f64().unwrap() >= 0.0);
            assert!(rec["pseudo_coverage"].is_number());
            assert!(rec["pseudo_precision"].is_number());
            assert!(rec["test_acc"].is_number() && rec["val_acc"].is_number());
        }
    }
    assert_eq!((last, robust), (15, 10));

    let report: Value = serde_json::from_str(&ok(cdro(
        root.path(),
        &["eval", "--run", run.to_str().unwrap(), "--data", root.path().join("d").to_str().unwrap()],
    )))
    .unwrap();
    assert_eq!(report["eval_set"], "test");
    assert_eq!(report["ensemble_acc"], summary["adaptcdrp"]["test_acc"]);
}

#[test]
fn out_of_range_epsilon_fails_before_training() {
    let root = tempfile::tempdir().unwrap();
    generate(root.path(), "d", &["--n", "200", "--n-test", "10"]);
    let out = cdro(
        root.path(),
        &["train", "--data", root.path().join("d").to_str().unwrap(), "--epsilon", "0.3", "--out", "run"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
    assert!(!root.path().join("run/metrics.jsonl").exists());
}

#[test]
fn schema_errors_name_the_line() {
    let root = tempfile::tempdir().unwrap();
    let d = root.path().join("bad");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("features.csv"), "instance_id,f0\n0,1.0\n1,2.0\n2,0.5\n").unwrap();
    fs::write(d.join("annotations.csv"), "instance_id,annotator_id,label\n0,0,1\n1,0,2\n2,0,x\n").unwrap();
    let out = cdro(root.path(), &["train", "--data", d.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("annotations.csv:4"), "{err}");

    let out = cdro(root.path(), &["train", "--data", root.path().join("missing").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing dataset file"));
}

#[test]
fn config_file_sets_values_and_flags_override() {
    let root = tempfile::tempdir().unwrap();
    generate(root.path(), "d", &["--n", "300", "--n-test", "50"]);
    let cfg = root.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "data_dir = {:?}\noutput_dir = \"cfg-run\"\nseed = 5\nepochs = 6\nwarmup_epochs = 2\nlambda = 3.0\narchitecture = \"linear\"\n",
            root.path().join("d")
        ),
    )
    .unwrap();
    ok(cdro(root.path(), &["train", "--config", cfg.to_str().unwrap(), "--lambda", "7"]));
    let used: Value = serde_json::from_slice(&fs::read(root.path().join("cfg-run/config.json")).unwrap()).unwrap();
    assert_eq!(used["train"]["seed"], 5);
    assert_eq!(used["train"]["epochs"], 6);
    assert_eq!(used["train"]["lambda"], 7.0);
    assert_eq!(used["train"]["architecture"], "linear");

    fs::write(&cfg, "epochz = 3\n").unwrap();
    let out = cdro(root.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn oracle_check_reports_every_suite() {
    let root = tempfile::tempdir().unwrap();
    let text = ok(cdro(root.path(), &["oracle-check", "--quick", "--seed", "3"]));
    let lines: Vec<_> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(lines.len(), 5, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{text}");
}
