use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_NET: &str = r#"
name = "small"
input_channels = 3
input_length = 64

[[layer]]
kind = "conv1d"
out = 8
k = 5
pad_l = 2
pad_r = 2

[[layer]]
kind = "bn"

[[layer]]
kind = "relu"

[[layer]]
kind = "conv1d"
out = 8
k = 3
groups = 2
pad_l = 1
pad_r = 1

[[layer]]
kind = "bn"

[[layer]]
kind = "relu"

[[layer]]
kind = "gap"

[[layer]]
kind = "linear"
out = 2
"#;

struct Work {
    dir: TempDir,
    config: String,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        std::fs::write(&config, SMALL_NET).unwrap();
        Self {
            config: config.to_str().unwrap().to_string(),
            dir,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_picoconv"))
            .args(args)
            .env_remove("PICOCONV_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn signals(&self, n: usize) -> Vec<String> {
        (0..n)
            .map(|i| {
                let p = self.path(&format!("sig{i}.csv"));
                let idx = i.to_string();
                self.ok(&["gen-data", "--config", &self.config, "--index", &idx, "--out", s(&p)]);
                s(&p).to_string()
            })
            .collect()
    }

    fn weights(&self) -> String {
        let p = self.path("w.pcw");
        self.ok(&["gen-weights", "--config", &self.config, "--seed", "5", "--out", s(&p)]);
        s(&p).to_string()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn inspect_reports_preset_counts() {
    let w = Work::new();
    let v = json(&w.ok(&["inspect"]));
    assert_eq!(v["params"]["total"], 30_914);
    assert_eq!(v["ops"]["total"], 65_265_536u64);
    assert_eq!(v["ungrouped_baseline_params"], 428_994);
}

#[test]
fn inspect_reads_a_config_file_and_writes_the_report() {
    let w = Work::new();
    let report = w.path("inspect.json");
    let out = w.ok(&["inspect", "--config", &w.config, "--report-out", s(&report)]);
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["network"], "small");
}

#[test]
fn gen_data_honors_the_seed_variable() {
    let w = Work::new();
    let (a, b, c) = (w.path("a.csv"), w.path("b.csv"), w.path("c.csv"));
    w.ok(&["gen-data", "--config", &w.config, "--seed", "9", "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_picoconv"))
        .args(["gen-data", "--config", &w.config, "--out", s(&b)])
        .env("PICOCONV_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    w.ok(&["gen-data", "--config", &w.config, "--out", s(&c)]);
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn compress_then_infer_in_both_modes() {
    let w = Work::new();
    let weights = w.weights();
    let sigs = w.signals(3);
    let model = w.path("model.pcw");
    let mut args = vec!["compress", "--config", &w.config, "--weights", &weights, "--widths", "8"];
    args.extend(["--out", s(&model), "--signals"]);
    args.extend(sigs.iter().map(String::as_str));
    let report = json(&w.ok(&args));
    assert!(report["quant"]["data_bits"].as_u64().unwrap() > 0);
    assert!(report["activation_formats"].is_object());

    for (mode, file) in [("float", weights.as_str()), ("fixed", s(&model))] {
        let mut args = vec!["infer", "--config", &w.config, "--weights", file, "--mode", mode, "--signals"];
        args.extend(sigs.iter().map(String::as_str));
        let v = json(&w.ok(&args));
        let results = v["results"].as_array().unwrap();
        assert_eq!(results.len(), 3);
        assert!(results.iter().all(|r| r["logits"].as_array().unwrap().len() == 2));
    }
}

#[test]
fn fixed_inference_needs_calibrated_formats() {
    let w = Work::new();
    let weights = w.weights();
    let model = w.path("model.pcw");
    w.ok(&["compress", "--config", &w.config, "--weights", &weights, "--out", s(&model)]);
    let sig = w.signals(1);
    let out = w.run(&["infer", "--config", &w.config, "--weights", s(&model), "--mode", "fixed", "--signals", &sig[0]]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("activation formats"));
}

#[test]
fn simulate_reports_cycles_memory_and_throughput() {
    let w = Work::new();
    let v = json(&w.ok(&["simulate"]));
    assert_eq!(v["cycles"]["total"], 20_073);
    assert_eq!(v["memory"]["safe"], true);
    let gops = v["perf"]["throughput_gops"].as_f64().unwrap();
    assert!((gops - 0.9).abs() < 0.01, "{gops}");

    let v = json(&w.ok(&["simulate", "--line-buffer", "4"]));
    assert_eq!(v["memory"]["safe"], false);
}

#[test]
fn analyze_bias_writes_a_table() {
    let w = Work::new();
    let weights = w.weights();
    let sigs = w.signals(2);
    let table = w.path("rates.csv");
    w.ok(&["analyze-bias", "--config", &w.config, "--weights", &weights, "--signals", &sigs[0], &sigs[1], "--out", s(&table)]);
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.lines().count() > 1);
}

#[test]
fn pipeline_runs_end_to_end() {
    let w = Work::new();
    let report = w.path("run.json");
    w.ok(&["pipeline", "--num-signals", "2", "--seed", "3", "--report-out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["ledger"]["stages"].as_array().unwrap().len(), 4);
    assert_eq!(v["inference"].as_array().unwrap().len(), 2);
    assert_eq!(v["knobs"]["seed"]["value"], 3);
}

#[test]
fn pipeline_on_a_custom_network_with_user_knobs() {
    let w = Work::new();
    let weights = w.weights();
    let v = json(&w.ok(&[
        "pipeline",
        "--config",
        &w.config,
        "--weights",
        &weights,
        "--num-signals",
        "2",
        "--nzp-thresholds",
        "0.05,0.05",
        "--bdp-thresholds",
        "none",
        "--widths",
        "6,8,16,14,8,11",
    ]));
    assert_eq!(v["network"], "small");
    assert_eq!(v["knobs"]["quant"]["provenance"], "user-input");
}

#[test]
fn missing_tensor_fails_without_a_report() {
    let w = Work::new();
    // Weights for a different network lack the tensors this one needs.
    let other = w.path("preset.pcw");
    w.ok(&["gen-weights", "--out", s(&other)]);
    let report = w.path("run.json");
    let out = w.run(&["pipeline", "--config", &w.config, "--weights", s(&other), "--report-out", s(&report)]);
    assert!(!out.status.success());
    assert!(!report.exists());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layer"), "{err}");
}

#[test]
fn bad_arguments_are_rejected() {
    let w = Work::new();
    for args in [
        &["pipeline", "--widths", "8,8"][..],
        &["pipeline", "--nzp-thresholds", "0.1,x"],
        &["inspect", "--config", "no-such-preset"],
        &["simulate", "--power-watts", "0"],
    ] {
        let out = w.run(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(out.stdout.is_empty(), "{args:?} printed a report");
    }
}
