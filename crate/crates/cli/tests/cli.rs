use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bpre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpre")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{
  "env": {{"preset": "gaussian-x", "params": {{"sigma": 1.0}}}},
  "n_sweep": [60, 120],
  "replicas": 150,
  "seed": 7,
  "min_branch_occupancy": 10,
  "limit": {{"path_len": 300, "max_steps": 300, "batch": 200, "renewal_replicas": 400}}{extra}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn csv_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("report.csv")).unwrap().lines().map(String::from).collect()
}

#[test]
fn selftest_passes() {
    let out = bpre(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("golden checks passed"));
}

#[test]
fn missing_or_bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = bpre(&["theorem2", "--config", "/nonexistent/cfg.json", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let typo = small_config(tmp.path(), r#", "replica": 300"#);
    let out = bpre(&["theorem2", "--config", typo.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replica"));
    assert_eq!(bpre(&["nonsense"]).status.code(), Some(1));
    let cfg = small_config(tmp.path(), "");
    let out = bpre(&["theorem2", "--config", cfg.to_str().unwrap(), "--replicas", "10"]);
    assert_eq!(out.status.code(), Some(1), "replicas below 100 must be rejected");
}

#[test]
fn theorem2_happy_path_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out_dir = tmp.path().join("out");
    let out = bpre(&["theorem2", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "42"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "aggregates.json", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let rows = csv_rows(&out_dir);
    assert_eq!(rows[0], "n,replica,tau_n,tau_nt,tau_ntn,branch,observable,s_or_lambda,value,weight,clamped");
    // log_o plus lambda in {0, 0.5, 1, 3} per replica and n
    assert_eq!(rows.len() - 1, 2 * 150 * 5);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["finished"].is_string());
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("aggregates.json")).unwrap()).unwrap();
    assert_eq!(agg["config"]["seed"], 42);
    assert_eq!(agg["aggregates"]["pipeline"], "theorem2");
}

#[test]
fn flags_override_config_and_outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = vec!["theorem2", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = bpre(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.join("report.csv")).unwrap()
    };
    let base = run("a", &["--threads", "1"]);
    assert_eq!(base, run("b", &["--threads", "4"]));
    assert_eq!(base, run("c", &["--seed", "7"]), "flag equal to the config value changes nothing");
    assert_ne!(base, run("d", &["--seed", "8"]));
    let more = run("e", &["--replicas", "200"]);
    let count = |bytes: &[u8]| String::from_utf8_lossy(bytes).lines().count();
    assert_eq!((count(&more) - 1) * 150, (count(&base) - 1) * 200);
}

#[test]
fn json_format_and_other_pipelines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let dir = tmp.path().join("t1");
    let out = bpre(&["theorem1", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().len() > 1000);
    for cmd in ["limits", "fluctuation"] {
        let dir = tmp.path().join(cmd);
        let out = bpre(&[cmd, "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn shipped_example_configs_parse() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/configs");
    for entry in fs::read_dir(docs).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        bpre_core::experiments::ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
