use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn neglab(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neglab"));
    c.args(args).env_remove("NEGLAB_OUT");
    if let Some(o) = env_out {
        c.env("NEGLAB_OUT", o);
    }
    c.output().unwrap()
}

fn ok(o: &Output) -> PathBuf {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8_lossy(&o.stdout).trim())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn error_json(o: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap()
}

#[test]
fn gen_tasks_writes_manifest_with_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let run = ok(&neglab(&["--out", out, "--seed", "3", "gen-tasks", "--n-examples", "160"], None));
    assert!(run.starts_with(tmp.path()));
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-gen-tasks"));
    let m = manifest(&run);
    assert_eq!(m["command"], "gen-tasks");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["params"]["n_examples"], 160);
    let outputs = m["outputs"].as_array().unwrap();
    let names: Vec<&str> = outputs.iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["tasks.jsonl", "balance.csv"]);
    for f in outputs {
        let bytes = fs::read(run.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("lab.toml");
    fs::write(&cfg, "seed = 9\n[gen-tasks]\nn-examples = 320\nkind = \"parity\"\n").unwrap();
    let out = tmp.path().join("runs");
    let args = ["--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "gen-tasks"];
    let m = manifest(&ok(&neglab(&args, None)));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["params"]["n_examples"], 320);
    assert_eq!(m["config"]["params"]["kind"], "parity");
    assert_eq!(m["config"]["params"]["n_options"], 2);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);

    let mut more = args.to_vec();
    more.extend(["--n-examples", "80", "--seed", "4"]);
    let m = manifest(&ok(&neglab(&more, None)));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["params"]["n_examples"], 80);
    assert_eq!(m["config"]["params"]["kind"], "parity");
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("lab.toml");
    fs::write(&cfg, "[gen-tasks]\nn-exampels = 320\n").unwrap();
    let o = neglab(&["--out", tmp.path().to_str().unwrap(), "--config", cfg.to_str().unwrap(), "gen-tasks"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("n_exampels"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1, "only the config file");
}

#[test]
fn out_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = ok(&neglab(&["gen-tasks", "--n-examples", "80"], Some(tmp.path())));
    assert_eq!(run.parent().unwrap(), tmp.path());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(neglab(&["--out", out, "frobnicate"], None).status.code(), Some(2));
    assert_eq!(neglab(&["--out", out, "gen-tasks", "--n-options", "two"], None).status.code(), Some(2));
    let o = neglab(&["--out", out, "sweep"], None);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");
    assert_eq!(fs::read_dir(tmp.path()).map(|d| d.count()).unwrap_or(0), 0, "no run directory is left behind");
}

#[test]
fn module_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = neglab(&["--out", out, "gen-tasks", "--n-examples", "7"], None);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "input");
    let o = neglab(&["--out", out, "sweep", "--model", "/nonexistent/model.nglb", "--tasks", "/nonexistent"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = neglab(&["--out", tmp.path().to_str().unwrap(), "report"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no results found"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn report_indexes_runs_without_touching_them() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let first = ok(&neglab(&["--out", out, "gen-tasks", "--n-examples", "80"], None));
    let before = fs::read(first.join("manifest.json")).unwrap();
    let report = ok(&neglab(&["--out", out, "report"], None));
    assert_ne!(report, first);
    assert_eq!(fs::read(first.join("manifest.json")).unwrap(), before);
    let index = fs::read_to_string(report.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 3);
    assert!(index.lines().nth(1).unwrap().contains("tasks.jsonl"));

    // a tampered output is detected
    fs::write(first.join("balance.csv"), "changed\n").unwrap();
    let o = neglab(&["--out", out, "report"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash mismatch"));
}

#[test]
fn train_then_estimate_from_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let model = ok(&neglab(&["--out", out, "train", "--n-examples", "160", "--steps", "3", "--contexts", "i0-z-s0"], None));
    for f in ["tasks.jsonl", "model.nglb", "model.toml", "train_log.csv", "train_summary.csv"] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let m = model.to_str().unwrap();
    let est = ok(&neglab(&["--out", out, "estimate", "--model", m, "--tasks", m, "--n-prompts", "2"], None));
    let csv = fs::read_to_string(est.join("estimates.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "prompt_id,layer,neuron,cg,activation,neurgrad,ig");
    assert_eq!(csv.lines().count(), 1 + 2 * 4 * 256);
    let inputs = manifest(&est)["inputs"].as_array().unwrap().len();
    assert_eq!(inputs, 2);
}
