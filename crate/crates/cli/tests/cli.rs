use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "synthetic": {"n_per_class": [180, 20], "test_per_class": [90, 10], "dim": 8, "seed": 3},
  "injection": {"rate": 0.05, "seed": 3},
  "pipeline": {"seed": 3, "training": {"learning_rate": 0.001, "epochs": 5}},
  "review": {"pool_size": 100, "set_size": 10, "class_mix": [[0, 7], [1, 3]],
             "max_per_group": 100, "min_frame_gap": 0}
}"#;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_owned();
        fs::write(root.join("cfg.json"), SMALL).unwrap();
        Self { _tmp: tmp, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mislabel"))
            .args(args)
            .current_dir(&self.root)
            .env_remove("MISLABEL_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.root.join(rel)).unwrap()).unwrap()
    }

    /// gen, inject and detect with the small config; outputs under `mislabel-out/`.
    fn through_detect(&self) {
        self.ok(&["gen", "--config", "cfg.json"]);
        self.ok(&["inject", "--config", "cfg.json", "--data", "mislabel-out/gen/corpus.csv"]);
        self.ok(&["detect", "--config", "cfg.json", "--data", "mislabel-out/inject/noisy.csv"]);
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pipeline_commands_chain_through_their_outputs() {
    let ws = Workspace::new();
    ws.through_detect();
    for f in ["corpus.csv", "run_manifest.json"] {
        assert!(ws.root.join("mislabel-out/gen").join(f).exists(), "{f}");
    }
    for f in ["noisy.csv", "injection.json", "flips.csv", "uncertainty.csv"] {
        assert!(ws.root.join("mislabel-out/inject").join(f).exists(), "{f}");
    }
    for f in [
        "plan.json",
        "corrections.csv",
        "filters.csv",
        "assessments_stage1.csv",
        "assessments_stage2.csv",
        "gmm_stage1.json",
        "gmm_stage2.json",
    ] {
        assert!(ws.root.join("mislabel-out/detect").join(f).exists(), "{f}");
    }
    let inj = ws.json("mislabel-out/inject/injection.json");
    assert_eq!(inj["flipped"].as_array().unwrap().len(), 10);

    ws.ok(&[
        "report",
        "--plan",
        "mislabel-out/detect/plan.json",
        "--injection",
        "mislabel-out/inject/injection.json",
        "--manifest",
        "mislabel-out/inject/noisy.csv",
    ]);
    let det = ws.json("mislabel-out/report/detection.json");
    let n = |k: &str| det[k].as_u64().unwrap();
    assert_eq!(n("noisy_total"), 10);
    assert_eq!(n("detected") + n("missed"), 10);
    let table = fs::read_to_string(ws.root.join("mislabel-out/report/detection_table.txt")).unwrap();
    assert!(table.starts_with("Cleaning status"));
    assert!(table.lines().next().unwrap().ends_with("5%"));
    let proj = fs::read_to_string(ws.root.join("mislabel-out/report/projection.csv")).unwrap();
    assert_eq!(proj.lines().count(), 201);
    let density = fs::read_to_string(ws.root.join("mislabel-out/report/gmm_density_stage1.csv")).unwrap();
    assert!(density.starts_with("x,total_density,comp_0,comp_1,comp_2\n"));
}

#[test]
fn run_manifest_records_seeds_inputs_and_outputs() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--config", "cfg.json", "--seed", "42", "--out", "g"]);
    let m = ws.json("g/run_manifest.json");
    assert_eq!(m["command"], "gen");
    assert_eq!(m["seeds"]["synthetic"], 42);
    assert_eq!(m["config"]["synthetic"]["seed"], 42);
    assert_eq!(m["inputs"]["config"], "cfg.json");
    assert_eq!(m["outputs"][0], "g/corpus.csv");
    assert!(m["duration_ms"].is_u64());
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn out_env_sets_the_output_root() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_mislabel"))
        .args(["gen", "--config", "cfg.json"])
        .current_dir(&ws.root)
        .env("MISLABEL_OUT", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(ws.root.join("elsewhere/gen/corpus.csv").exists());
}

#[test]
fn clean_and_train_eval_feed_the_metrics_table() {
    let ws = Workspace::new();
    ws.through_detect();
    ws.ok(&[
        "clean",
        "--data",
        "mislabel-out/inject/noisy.csv",
        "--plan",
        "mislabel-out/detect/plan.json",
    ]);
    let plan = ws.json("mislabel-out/detect/plan.json");
    let k_f = plan["k_f"].as_u64().unwrap() as usize;
    let filtered = fs::read_to_string(ws.root.join("mislabel-out/clean/filtered.csv")).unwrap();
    let rows = filtered.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 300 - k_f);
    assert!(ws.root.join("mislabel-out/clean/relabel.csv").exists());

    for (name, data) in [("noisy", "mislabel-out/inject/noisy.csv"), ("filtered", "mislabel-out/clean/filtered.csv")] {
        ws.ok(&["train-eval", "--config", "cfg.json", "--data", data, "--name", name, "--out", &format!("te_{name}")]);
    }
    let m = ws.json("te_noisy/metrics.json");
    assert_eq!(m["name"], "noisy");
    assert_eq!(m["train_samples"], 200);
    assert_eq!(m["metrics"]["samples"], 100);
    ws.ok(&[
        "report",
        "--metrics",
        "Uncleaned=te_noisy/metrics.json",
        "--metrics",
        "Filtered=te_filtered/metrics.json",
    ]);
    let table = fs::read_to_string(ws.root.join("mislabel-out/report/metrics_table.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("Setting"));
    assert!(lines[1].starts_with("Uncleaned"));
    assert!(lines[2].starts_with("Filtered"));
}

#[test]
fn detect_is_byte_identical_across_runs() {
    let ws = Workspace::new();
    ws.through_detect();
    ws.ok(&["detect", "--config", "cfg.json", "--data", "mislabel-out/inject/noisy.csv", "--out", "again"]);
    for f in ["plan.json", "corrections.csv", "filters.csv", "assessments_stage1.csv", "gmm_stage2.json"] {
        let a = fs::read(ws.root.join("mislabel-out/detect").join(f)).unwrap();
        let b = fs::read(ws.root.join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn detect_overrides_reach_the_plan() {
    let ws = Workspace::new();
    ws.through_detect();
    ws.ok(&[
        "detect",
        "--config",
        "cfg.json",
        "--data",
        "mislabel-out/inject/noisy.csv",
        "--k-c",
        "2",
        "--k-f",
        "5",
        "--runs",
        "3",
        "--out",
        "fixed",
        "--diagnostics",
    ]);
    let plan = ws.json("fixed/plan.json");
    assert_eq!(plan["k_c"], 2);
    assert_eq!(plan["k_f"], 5);
    assert!(ws.root.join("fixed/diagnostics/ledger_stage1_losses.csv").exists());
}

fn assert_error(out: &Output, category: &str, code: i32) {
    assert_eq!(out.status.code(), Some(code), "{}", stderr(out));
    let err = stderr(out);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with(&format!("error[{category}]: ")), "{line}");
}

#[test]
fn errors_print_one_categorized_line() {
    let ws = Workspace::new();
    assert_error(&ws.run(&["detect", "--data", "missing.csv"]), "io", 1);
    assert_error(&ws.run(&["frobnicate"]), "usage", 2);
    assert_error(&ws.run(&["gen", "--dim", "many"]), "usage", 2);
    assert_error(&ws.run(&["report"]), "usage", 2);

    fs::write(ws.root.join("bad.json"), "{\"pipeline\": 3}").unwrap();
    assert_error(&ws.run(&["gen", "--config", "bad.json"]), "config", 1);

    ws.ok(&["gen", "--config", "cfg.json"]);
    assert_error(
        &ws.run(&["inject", "--config", "cfg.json", "--data", "mislabel-out/gen/corpus.csv", "--noise-rate", "0.9"]),
        "config",
        1,
    );
    fs::write(ws.root.join("broken.csv"), "sample_id,split\nx,dev\n").unwrap();
    let out = ws.run(&["detect", "--data", "broken.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error["));
}

#[test]
fn help_and_version_exit_cleanly() {
    let ws = Workspace::new();
    let out = ws.ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen", "inject", "detect", "clean", "train-eval", "report", "review"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    ws.ok(&["--version"]);
}

fn write_votes(path: &Path, ids: &[String], mislabel: usize) {
    let mut log = String::new();
    for (i, id) in ids.iter().enumerate() {
        for reviewer in ["a", "b", "c"] {
            let line = if i < mislabel {
                format!(r#"{{"sample_id":"{id}","reviewer_id":"{reviewer}","verdict":"mislabel","revised_label":1,"timestamp":1}}"#)
            } else {
                format!(r#"{{"sample_id":"{id}","reviewer_id":"{reviewer}","verdict":"correct","timestamp":1}}"#)
            };
            log.push_str(&line);
            log.push('\n');
        }
    }
    fs::write(path, log).unwrap();
}

#[test]
fn review_export_computes_precision_from_the_log() {
    let ws = Workspace::new();
    ws.through_detect();
    let args = [
        "review",
        "--config",
        "cfg.json",
        "--data",
        "mislabel-out/inject/noisy.csv",
        "--assessments",
        "mislabel-out/detect/assessments_stage1.csv",
        "--log",
        "votes.jsonl",
        "--export",
        "--k",
        "10",
    ];
    fs::write(ws.root.join("votes.jsonl"), "").unwrap();
    assert_error(&ws.run(&args), "coverage", 1);

    let set = ws.json("mislabel-out/review/review_set.json");
    let ids: Vec<String> = set["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["sample_id"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(ids.len(), 10);
    write_votes(&ws.root.join("votes.jsonl"), &ids, 7);
    ws.ok(&args);
    let p = ws.json("mislabel-out/review/precision.json");
    assert_eq!(p["precision"], 70.0);
    let consensus = ws.json("mislabel-out/review/consensus.json");
    assert_eq!(consensus.as_array().unwrap().len(), 10);
}

#[test]
fn review_reports_an_occupied_port() {
    let ws = Workspace::new();
    ws.through_detect();
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let out = ws.run(&[
        "review",
        "--config",
        "cfg.json",
        "--data",
        "mislabel-out/inject/noisy.csv",
        "--assessments",
        "mislabel-out/detect/assessments_stage1.csv",
        "--bind",
        &addr,
    ]);
    assert_error(&out, "bind", 1);
}
