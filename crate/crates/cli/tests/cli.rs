use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpp")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tpp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns the parsed stderr error object.
fn fails(args: &[&str]) -> Value {
    let out = tpp(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["message"].is_string());
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"{
  "cavity": {
    "kappa": 9.676e6,
    "chi": {"e": -1.887e6, "g": 1.887e6, "f": -5.661e6},
    "eta": 1.2e7,
    "t_on": 0.04e-6,
    "t_off": 0.3e-6,
    "t_meas": 0.4e-6,
    "dt": 1e-8
  },
  "noise": {"model": "white"},
  "classes": ["e", "g", "f"],
  "n_shots": 300
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Workspace { dir: tempfile::tempdir().unwrap() };
        std::fs::write(w.path("sim.json"), CONFIG).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn simulate(&self, out: &str, seed: &str, threads: &str) -> PathBuf {
        let p = self.path(out);
        ok(&["--threads", threads, "simulate", "--config", s(&self.path("sim.json")), "--seed", seed, "--out", s(&p)]);
        p
    }
}

#[test]
fn simulate_is_deterministic_and_thread_independent() {
    let w = Workspace::new();
    let a = std::fs::read(w.simulate("a.tppd", "5", "1")).unwrap();
    let b = std::fs::read(w.simulate("b.tppd", "5", "3")).unwrap();
    let c = std::fs::read(w.simulate("c.tppd", "6", "1")).unwrap();
    assert!(a.starts_with(b"TPPD1\n{"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn train_eval_filters_round_trip() {
    let w = Workspace::new();
    let train = w.simulate("train.tppd", "1", "2");
    let test = w.simulate("test.tppd", "2", "2");
    let model = w.path("model.json");
    ok(&["train", "--data", s(&train), "--lambda", "0", "--method", "lsq", "--out", s(&model)]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    for key in ["classes", "lambda", "method", "W", "b"] {
        assert!(m.get(key).is_some(), "model lacks {key}");
    }
    assert_eq!(m["W"].as_array().unwrap().len(), 3);
    assert_eq!(m["W"][0].as_array().unwrap().len(), 2 * 40);

    let closed = w.path("closed.json");
    ok(&["train", "--data", s(&train), "--method", "closed-form", "--out", s(&closed)]);
    let c: Value = serde_json::from_str(&std::fs::read_to_string(&closed).unwrap()).unwrap();
    assert_eq!(c["method"], "closed-form");

    let report = w.path("report.json");
    ok(&["eval", "--data", s(&test), "--model", s(&model), "--rule", "argmax", "--report", s(&report)]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["confusion"].as_array().unwrap().len(), 3);
    let infid = r["infidelity"].as_f64().unwrap();
    assert!(infid > 0.0 && infid < 2.0 / 3.0, "{infid}");

    let stdout = ok(&["eval", "--data", s(&test), "--model", s(&model), "--rule", "gaussian", "--calib", s(&train)]);
    let g: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(g["rule"], "gaussian");

    let csv = w.path("filters.csv");
    ok(&["filters", "--model", s(&model), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("w0,") && lines[0].ends_with(",bias"));
    assert!(lines.iter().all(|l| l.split(',').count() == 2 * 40 + 1));
    assert!(!text.contains('\r'));
}

#[test]
fn baselines_spectra_and_crossval() {
    let w = Workspace::new();
    let data = w.simulate("d.tppd", "3", "2");
    for filter in ["matched:e,g", "boxcar", "boxcar:4-30", "ova:e"] {
        let out = ok(&["baseline", "--data", s(&data), "--filter", filter]);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["filter"], filter);
        assert!(v["fidelity"].as_f64().unwrap() > 1.0 / 3.0);
    }

    let psd = w.path("psd.csv");
    ok(&["psd", "--data", s(&data), "--class", "e", "--obs", "1", "--out", s(&psd)]);
    let text = std::fs::read_to_string(&psd).unwrap();
    assert_eq!(text.lines().next(), Some("freq_hz,power"));
    assert_eq!(text.lines().count(), 1 + 40 / 2 + 1);

    let report = w.path("cv.json");
    ok(&[
        "crossval", "--data", s(&data), "--pipeline", "multi-fgda:g,e", "--iters", "3", "--seed", "7", "--flip", "0.1",
        "--report", s(&report),
    ]);
    let cv: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(cv["n_iter"], 3);
    assert_eq!(cv["seed"], 7);
    assert_eq!(cv["iterations"].as_array().unwrap().len(), 3);
    let again = ok(&["crossval", "--data", s(&data), "--pipeline", "multi-fgda:g,e", "--iters", "3", "--seed", "7", "--flip", "0.1"]);
    let cv2: Value = serde_json::from_str(&again).unwrap();
    assert_eq!(cv["iterations"], cv2["iterations"]);
}

#[test]
fn failures_report_json_errors() {
    let w = Workspace::new();
    let data = w.simulate("d.tppd", "3", "1");

    let mut cfg: Value = serde_json::from_str(CONFIG).unwrap();
    cfg["noise"]["gain"] = 3.into();
    let bad_cfg = w.path("bad.json");
    std::fs::write(&bad_cfg, cfg.to_string()).unwrap();
    let e = fails(&["simulate", "--config", s(&bad_cfg), "--out", s(&w.path("x.tppd"))]);
    assert_eq!(e["error"], "InvalidConfig");

    let e = fails(&["train", "--data", s(&w.path("missing.tppd")), "--out", s(&w.path("m.json"))]);
    assert_eq!(e["error"], "IoError");

    let junk = w.path("junk.tppd");
    std::fs::write(&junk, b"NOPE\n").unwrap();
    let e = fails(&["train", "--data", s(&junk), "--out", s(&w.path("m.json"))]);
    assert_eq!(e["error"], "FormatError");

    let e = fails(&["psd", "--data", s(&data), "--class", "z", "--out", s(&w.path("p.csv"))]);
    assert_eq!(e["error"], "UnknownClass");

    let model = w.path("m.json");
    ok(&["train", "--data", s(&data), "--out", s(&model)]);
    let e = fails(&["eval", "--data", s(&data), "--model", s(&model), "--rule", "gaussian"]);
    assert_eq!(e["error"], "UsageError");

    let e = fails(&["repro", "fig3"]);
    assert_eq!(e["error"], "UnknownRecipe");

    let e = fails(&["train", "--bogus"]);
    assert_eq!(e["error"], "UsageError");
}

#[test]
fn version_reports_build_info() {
    let out = ok(&["--version"]);
    assert!(out.starts_with(&format!("tpp {}", env!("CARGO_PKG_VERSION"))), "{out}");
    assert!(out.contains("tpp-core"));
}

#[test]
fn repro_outputs_are_identical_across_runs_and_thread_counts() {
    let w = Workspace::new();
    let (a, b) = (w.path("a"), w.path("b"));
    let out_a = ok(&["--threads", "1", "repro", "pink-noise", "--seed", "3", "--out-dir", s(&a)]);
    ok(&["--threads", "2", "repro", "pink-noise", "--seed", "3", "--out-dir", s(&b)]);
    for f in ["pink-noise.csv", "pink-noise.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("pink-noise.csv")).unwrap();
    assert!(csv.starts_with("pink_to_white_power,tpp,tpp_se,fgda,fgda_se,e_metric,e_metric_se\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(out_a.lines().any(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")));
}
