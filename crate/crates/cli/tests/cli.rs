use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn roadscan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadscan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ROADSCAN_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_CONFIG: &str = r#"{
  "max_epochs": 2,
  "early_stopping": false,
  "image_side": 16,
  "samples_per_epoch": 16,
  "val_samples": 8,
  "batch_size": 8,
  "split": {"train_per_class": 6, "test_counts": [4, 4], "val_fraction": 0.34}
}"#;

/// A 10-per-class synthetic set, a config, and a trained checkpoint.
struct Trained {
    dir: tempfile::TempDir,
}

impl Trained {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        assert_eq!(code(&roadscan(&["synth", "--out", "data", "--per-class", "10", "--seed", "3"], p)), 0);
        std::fs::write(p.join("cfg.json"), SMALL_CONFIG).unwrap();
        let o = roadscan(&["train", "--data", "data", "--config", "cfg.json", "--out", "m.ck"], p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Trained { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for class in ["normal", "potholes"] {
        let mut names: Vec<PathBuf> = std::fs::read_dir(root.join(class))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        out.extend(names);
    }
    out
}

#[test]
fn synth_writes_images_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = roadscan(&["synth", "--out", out, "--per-class", "5", "--seed", "7"], p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = files_under(&p.join("a"));
    assert_eq!(a.len(), 10);
    for f in &a {
        let twin = p.join("b").join(f.strip_prefix(p.join("a")).unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(twin).unwrap());
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(p.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn missing_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadscan(&["synth", "--per-class", "5"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn seed_variable_is_honoured_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_roadscan"))
        .args(["synth", "--out", "d", "--per-class", "1"])
        .current_dir(dir.path())
        .env("ROADSCAN_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["seed_from_env"], true);
}

#[test]
fn train_smoke_and_determinism() {
    let t = Trained::new();
    let p = t.path();
    let history = std::fs::read_to_string(p.join("m.ck.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");
    assert!(p.join("m.ck.manifest.json").exists());

    let o = roadscan(&["train", "--data", "data", "--config", "cfg.json", "--out", "again.ck"], p);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(p.join("m.ck")).unwrap(), std::fs::read(p.join("again.ck")).unwrap());

    std::fs::write(p.join("bad.json"), "{\n  \"margin\": 1,\n  \"batch_size\": [\n").unwrap();
    let o = roadscan(&["train", "--data", "data", "--config", "bad.json", "--out", "x.ck"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let o = roadscan(
        &["train", "--data", "data", "--config", "cfg.json", "--out", "x.ck", "--preset", "nope"],
        p,
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("roadscan_head"));

    let runaway = SMALL_CONFIG.replacen('{', r#"{"rmsprop": {"learning_rate": 1e38},"#, 1);
    std::fs::write(p.join("runaway.json"), runaway).unwrap();
    let o = roadscan(&["train", "--data", "data", "--config", "runaway.json", "--out", "x.ck"], p);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!p.join("x.ck").exists());
}

#[test]
fn eval_report_curves_and_plot() {
    let t = Trained::new();
    let p = t.path();
    let o = roadscan(
        &[
            "eval", "--model", "m.ck", "--data", "data", "--report", "r.json", "--curves", "c", "--plot", "p.svg",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&std::fs::read(p.join("r.json")).unwrap()).unwrap();
    let keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    for k in [
        "eer",
        "eer_threshold",
        "auroc",
        "aupr",
        "threshold_used",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "counts",
        "n_genuine",
        "n_imposter",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(keys.len(), 12);

    let roc = std::fs::read_to_string(p.join("c_roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,far,tpr\n"));
    let pr = std::fs::read_to_string(p.join("c_pr.csv")).unwrap();
    assert!(pr.starts_with("threshold,precision,recall\n"));
    let scores = roadscan::evaluation::parse_scores_csv(&std::fs::read_to_string(p.join("c_scores.csv")).unwrap()).unwrap();
    let auroc = roadscan::evaluation::compute_auroc(&scores).unwrap();
    assert_eq!(report["auroc"].as_f64().unwrap(), auroc);

    let svg = std::fs::read_to_string(p.join("p.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));
}

#[test]
fn classify_exact_match_threshold_and_errors() {
    let t = Trained::new();
    let p = t.path();
    // singleton gallery so an exact copy must win
    for (class, file) in [("normal", "normal_0000.png"), ("potholes", "pothole_0000.png")] {
        std::fs::create_dir_all(p.join("g").join(class)).unwrap();
        std::fs::copy(p.join("data").join(class).join(file), p.join("g").join(class).join(file)).unwrap();
    }
    std::fs::copy(p.join("data/potholes/pothole_0000.png"), p.join("query.png")).unwrap();
    let o = roadscan(&["classify", "--model", "m.ck", "--gallery", "g", "--image", "query.png"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(line["label"], "pothole");
    assert_eq!(line["evidence"]["pothole"], 0.0);

    let o = roadscan(
        &["classify", "--model", "m.ck", "--gallery", "g", "--image", "query.png", "--threshold", "-0.25"],
        p,
    );
    let line: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(line["evidence"]["threshold"], -0.25);

    std::fs::write(p.join("junk.png"), b"not an image").unwrap();
    let o = roadscan(&["classify", "--model", "m.ck", "--gallery", "g", "--image", "junk.png"], p);
    assert_eq!(code(&o), 2);

    std::fs::remove_dir_all(p.join("g/potholes")).unwrap();
    let o = roadscan(&["classify", "--model", "m.ck", "--gallery", "g", "--image", "query.png"], p);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn verify_green_and_fault_injection() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadscan(&["verify", "--suite", "all"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let started = std::time::Instant::now();
    let o = roadscan(&["verify", "--suite", "metrics"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(started.elapsed().as_secs_f64() < 30.0);

    let o = roadscan(&["verify", "--suite", "gradcheck", "--perturb-gradient", "batchnorm"], dir.path());
    assert_eq!(code(&o), 4);
    let err = stderr(&o);
    assert!(err.contains("`batchnorm`"), "{err}");
    assert!(err.contains("inputs: {"), "{err}");

    let o = roadscan(&["verify", "--suite", "bogus"], dir.path());
    assert_eq!(code(&o), 2);
}
