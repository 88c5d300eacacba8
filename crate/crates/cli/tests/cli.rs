use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vlpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlpl"))
        .args(args)
        .env_remove("VLPL_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["synth", "--labels", "20", "--samples", "400", "--dim", "64", "--seed", "1", "--out-dir", d];
    args.extend_from_slice(extra);
    let o = vlpl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn line_value(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key:?} in {out}"))
        .trim()
        .to_string()
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), &[]);
    synth(b.path(), &[]);
    for name in ["images.vlemb", "labels.vlemb", "ground_truth.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn usage_and_invalid_value_errors_exit_two() {
    assert_eq!(vlpl(&["synth", "--samples", "10", "--dim", "4"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = vlpl(&["synth", "--labels", "20", "--samples", "10", "--dim", "4", "--avg-positives", "25", "--out-dir", d]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("avg_positives"));
    assert_eq!(vlpl(&["train", "--epochs", "0", "--out-dir", d]).status.code(), Some(2));
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = vlpl(&["train", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pseudolabel_threshold_and_budget_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    synth(dir.path(), &[]);
    // at tau = 0.03 a few single-positive rows clear even 0.999, so count
    // against the dumped probabilities instead of expecting zero
    let o = vlpl(&["pseudolabel", "--theta", "0.999", "--probs", "--out-dir", d]);
    assert!(o.status.success());
    let reported: usize = line_value(&stdout(&o), "pseudo positives:").parse().unwrap();
    let mut above = 0;
    for line in fs::read_to_string(dir.path().join("pseudo_labels.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let probs: Vec<f64> = v["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
        let pp: Vec<usize> = v["pseudo_positives"].as_array().unwrap().iter().map(|p| p.as_u64().unwrap() as usize).collect();
        for &l in &pp {
            assert!(probs[l] > 0.999);
        }
        above += pp.len();
    }
    assert_eq!(reported, above);
    assert!(reported < 20, "{reported} rows above 0.999");

    let cfg = dir.path().join("neg.toml");
    fs::write(&cfg, "[paths]\nout_dir = \".\"\n[pseudo]\ndelta_pct = 0.0\nuse_negatives = true\n").unwrap();
    let o = vlpl(&["--config", cfg.to_str().unwrap(), "pseudolabel"]);
    assert!(o.status.success());
    assert_eq!(line_value(&stdout(&o), "pseudo negatives:"), "0");
    let dump = fs::read_to_string(dir.path().join("pseudo_labels.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 320);
    assert!(!dump.contains("\"probs\""));
}

#[test]
fn noise_free_defaults_have_perfect_precision() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--noise", "0"]);
    let o = vlpl(&["pseudolabel", "--out-dir", dir.path().to_str().unwrap()]);
    let out = stdout(&o);
    assert!(line_value(&out, "pseudo positives:").parse::<usize>().unwrap() > 0);
    assert_eq!(line_value(&out, "pseudo-positive precision:"), "1.0000");
}

#[test]
fn train_twice_gives_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    synth(dir.path(), &["--test-samples", "100"]);
    let run = || {
        let o = vlpl(&["train", "--epochs", "3", "--out-dir", d]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join("history.csv")).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    for name in ["model.vlmdl", "model.vlmdl.json", "report.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["test"]["map"].as_f64().unwrap() > 0.0);

    let o = vlpl(&["eval", "--per-class", "--out-dir", d]);
    assert!(o.status.success());
    assert_eq!(line_value(&stdout(&o), "test mAP:"), format!("{:.2}", report["map"].as_f64().unwrap()));
    let csv = fs::read_to_string(dir.path().join("per_class_ap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn simulate_writes_split_and_single_positive_rows() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let o = vlpl(&["simulate", "--fraction", "0.25", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let split: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("split.json")).unwrap()).unwrap();
    assert_eq!(split["val_indices"].as_array().unwrap().len(), 100);
    let observed = fs::read_to_string(dir.path().join("observed.jsonl")).unwrap();
    assert_eq!(observed.lines().count(), 300);
    for line in observed.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["positives"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn sweep_writes_curves_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--test-samples", "100"]);
    let cfg = dir.path().join("sweep.toml");
    fs::write(
        &cfg,
        "[paths]\nout_dir = \".\"\n[train]\nepochs = 1\n[sweep]\nrepeats = 1\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let o = vlpl(&["--config", c, "sweep", "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("15 computed, 0 reused"));
    let curves: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("curve_theta_"))
        .collect();
    assert_eq!(curves.len(), 3);
    for c in &curves {
        assert_eq!(fs::read_to_string(c.path()).unwrap().lines().count(), 6);
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary["best_cell"]["tau"].as_f64().is_some());

    let o = vlpl(&["--config", c, "sweep"]);
    assert!(stdout(&o).contains("0 computed, 15 reused"));

    fs::write(&cfg, "[sweep]\nthetas = []\n").unwrap();
    assert_eq!(vlpl(&["--config", c, "sweep"]).status.code(), Some(2));
}

#[test]
fn dumped_config_reparses_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let first = vlpl(&["--dump-config", "--seed", "7", "--out-dir", d, "train", "--loss", "vlpl_full", "--delta", "10"]);
    assert!(first.status.success());
    let text = stdout(&first);
    assert!(text.contains("use_negatives = true"));
    let cfg = dir.path().join("dumped.toml");
    fs::write(&cfg, &text).unwrap();
    let second = vlpl(&["--config", cfg.to_str().unwrap(), "--dump-config", "train"]);
    assert_eq!(stdout(&second), text);
}
