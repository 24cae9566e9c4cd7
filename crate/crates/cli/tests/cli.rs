use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
n_runs = 3
[report]
n_boot = 500
[simulation]
slide_w_um = 600.0
slide_h_um = 600.0
n_mitoses = 12
n_test_slides = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_zmitosis"));
    c.env_remove("ZMITOSIS_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn run_all_repeats_byte_for_byte_at_any_worker_count() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let mut outputs = Vec::new();
    for (tag, w) in [("a", "1"), ("b", "1"), ("c", "4"), ("d", "8")] {
        let d = t.path().join(tag);
        ok(&["--config", s(&cfg), "--workers", w, "--output-dir", s(&d), "run-all"]);
        outputs.push(files(&d));
    }
    assert!(outputs[0].contains_key("report_sensitivity.csv"));
    assert!(outputs[0].contains_key("run-manifest.json"));
    for o in &outputs[1..] {
        assert_eq!(o, &outputs[0]);
    }
}

#[test]
fn simulate_then_report_equals_run_all() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let all = t.path().join("all");
    let piped = t.path().join("piped");
    ok(&["--config", s(&cfg), "--output-dir", s(&all), "run-all"]);
    ok(&["--config", s(&cfg), "simulate", "--out-dir", s(&piped)]);
    ok(&["--config", s(&cfg), "report", "--samples", s(&piped.join("samples.csv")), "--out-dir", s(&piped)]);
    let (a, p) = (files(&all), files(&piped));
    for name in ["samples.csv", "ground_truth.csv", "report_sensitivity.csv", "report_precision.csv"] {
        assert_eq!(a[name], p[name], "{name}");
    }
}

#[test]
fn manifest_regenerates_its_outputs() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let first = t.path().join("first");
    let again = t.path().join("again");
    ok(&["--config", s(&cfg), "--seed", "77", "--output-dir", s(&first), "run-all"]);
    let manifest = first.join("run-manifest.json");
    ok(&["--config", s(&manifest), "--output-dir", s(&again), "run-all"]);
    assert_eq!(files(&first), files(&again));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["seeds"]["master_seed"], "77");
    assert_eq!(m["command"], "run-all");
    assert!(m["outputs"]["report_precision.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "master_seed = 5\n");
    let hash = |extra: &[&str]| {
        let mut args = vec!["--config", s(&cfg), "--validate-only"];
        args.extend_from_slice(extra);
        args.push("run-all");
        let o = ok(&args);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["valid"], true);
        v["config_sha256"].as_str().unwrap().to_string()
    };
    let from_file = hash(&[]);
    assert_ne!(from_file, hash(&["--seed", "6"]));
    assert_eq!(from_file, hash(&["--seed", "5"]));
    // output location is not part of the experiment
    assert_eq!(from_file, hash(&["--output-dir", "/elsewhere"]));
}

#[test]
fn config_path_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "n_runs = 0\n");
    let o = bin()
        .env("ZMITOSIS_CONFIG", &cfg)
        .args(["--validate-only", "run-all"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "validation");
}

#[test]
fn validation_lists_every_violation_with_its_key() {
    let t = tempfile::tempdir().unwrap();
    let ann = t.path().join("ann.csv");
    fs::write(&ann, "slide_id,x_um,y_um,class\n").unwrap();
    let text = format!(
        r#"
n_runs = 0
merge_radius_um = -1.0
[[stores]]
scanner = "A"
pipeline = "p"
layer_mode = "zstack"
role = "calibration"
path = "{}"
annotations = "{}"
"#,
        s(&t.path().join("missing-store")),
        s(&ann)
    );
    let cfg = write_config(t.path(), &text);
    let o = run(&["--config", s(&cfg), "run-all"]);
    assert_eq!(o.status.code(), Some(2));
    let e = &error_json(&o)["error"];
    assert_eq!(e["kind"], "validation");
    let v: Vec<String> = e["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_str().unwrap().to_string())
        .collect();
    for key in ["n_runs", "merge_radius_um", "stores[0].path"] {
        assert!(v.iter().any(|m| m.starts_with(key)), "{key} missing from {v:?}");
    }
    assert!(v.iter().any(|m| m.contains("test")), "missing test store not reported: {v:?}");
}

#[test]
fn stage_failure_names_the_artifact() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nowhere");
    let o = run(&["detect", "--store", s(&missing), "--out", s(&t.path().join("c.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = &error_json(&o)["error"];
    assert_eq!(e["kind"], "stage");
    assert_eq!(e["artifact"], s(&missing));
}

#[test]
fn version_flag() {
    let o = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn unknown_config_key_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "n_rnus = 3\n");
    let o = run(&["--config", s(&cfg), "--validate-only", "run-all"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("n_rnus"));
}

#[test]
fn store_commands_compose() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(
        t.path(),
        r#"
n_runs = 1
[simulation]
render_stores = true
slide_w_um = 400.0
slide_h_um = 400.0
n_mitoses = 6
n_test_slides = 1
"#,
    );
    let c = s(&cfg);
    let sim = t.path().join("sim");
    ok(&["--config", c, "simulate", "--out-dir", s(&sim)]);
    let gt = sim.join("ground_truth.csv");
    let store = |i: usize| sim.join("stores").join(format!("r01-s{i}"));
    let p = |n: &str| t.path().join("p").join(n);
    ok(&["--config", c, "detect", "--store", s(&store(0)), "--out", s(&p("cal.jsonl"))]);
    ok(&["--config", c, "merge", "--input", s(&p("cal.jsonl")), "--out", s(&p("cal.m.jsonl"))]);
    ok(&[
        "--config", c, "fuse-train", "--store", s(&store(0)), "--candidates", s(&p("cal.m.jsonl")),
        "--annotations", s(&gt), "--slide-id", "r01-s0", "--out", s(&p("model.json")),
    ]);
    ok(&["--config", c, "detect", "--store", s(&store(1)), "--out", s(&p("t.jsonl"))]);
    ok(&["--config", c, "merge", "--input", s(&p("t.jsonl")), "--out", s(&p("t.m.jsonl"))]);
    ok(&[
        "--config", c, "fuse-predict", "--store", s(&store(1)), "--candidates", s(&p("t.m.jsonl")),
        "--model", s(&p("model.json")), "--out", s(&p("pred.csv")),
    ]);
    ok(&[
        "--config", c, "evaluate", "--predictions", s(&p("pred.csv")), "--annotations", s(&gt),
        "--slide-id", "r01-s1", "--out", s(&p("eval.json")),
    ]);
    let ev: serde_json::Value = serde_json::from_slice(&fs::read(p("eval.json")).unwrap()).unwrap();
    let sens = ev["sensitivity"].as_f64().unwrap();
    assert!(sens > 0.0 && sens <= 1.0, "{ev}");
    let merged = fs::read_to_string(p("t.m.jsonl")).unwrap().lines().count();
    let raw = fs::read_to_string(p("t.jsonl")).unwrap().lines().count();
    assert!(merged <= raw && merged > 0);
    for n in ["cal.jsonl", "model.json", "pred.csv", "eval.json"] {
        assert!(p(&format!("{n}.manifest.json")).is_file(), "{n} manifest");
    }

    // same scan as reference and target: identity transform, all refined
    ok(&[
        "--config", c, "register", "--reference", s(&store(0)), "--target", s(&store(0)),
        "--annotations", s(&gt), "--out", s(&p("xfer.csv")),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(p("xfer.csv.manifest.json")).unwrap()).unwrap();
    let tr = &m["result"]["transform"];
    assert_eq!(tr["scale"], 1.0);
    assert_eq!(tr["rotation_deg"], 0.0);
}

#[test]
fn run_all_over_stores() {
    let t = tempfile::tempdir().unwrap();
    let sim_cfg = write_config(
        t.path(),
        r#"
n_runs = 1
[simulation]
render_stores = true
slide_w_um = 400.0
slide_h_um = 400.0
n_mitoses = 8
n_test_slides = 2
"#,
    );
    let sim = t.path().join("sim");
    ok(&["--config", s(&sim_cfg), "simulate", "--out-dir", s(&sim)]);
    let gt = sim.join("ground_truth.csv");
    let mut text = String::from("n_runs = 2\n[report]\nn_boot = 200\n[detector]\nkind = \"raster\"\n");
    for mode in ["single", "zstack"] {
        for (i, role) in ["calibration", "test", "test"].iter().enumerate() {
            text += &format!(
                "[[stores]]\nscanner = \"SIM\"\npipeline = \"raster\"\nlayer_mode = \"{mode}\"\nrole = \"{role}\"\npath = \"{}\"\nannotations = \"{}\"\n",
                s(&sim.join("stores").join(format!("r01-s{i}"))),
                s(&gt)
            );
        }
    }
    let cfg = t.path().join("stores.toml");
    fs::write(&cfg, text).unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    ok(&["--config", s(&cfg), "--workers", "1", "--output-dir", s(&a), "run-all"]);
    ok(&["--config", s(&cfg), "--workers", "4", "--output-dir", s(&b), "run-all"]);
    assert_eq!(files(&a), files(&b));
    let samples = fs::read_to_string(a.join("samples.csv")).unwrap();
    // pooled and per-slide rows for both modes
    assert!(samples.lines().any(|l| l.contains(",single,") && l.ends_with(",")));
    assert!(samples.lines().any(|l| l.contains(",zstack,") && l.ends_with("r01-s2")));
    let report = fs::read_to_string(a.join("report_sensitivity.csv")).unwrap();
    assert!(report.contains("SIM,raster,zstack,sensitivity"), "{report}");
}
