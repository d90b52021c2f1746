use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MINIMAL: &str = r#"{
    "version": 1,
    "environment": {
        "inline": {
            "prompts": ["x0", "x1"],
            "responses": ["a", "b", "c"],
            "mu": [0.5, 0.5],
            "feature_dim": 2,
            "features": [[1.0, 0.0], [0.0, 1.0], [-0.5, 0.5], [0.5, 0.5], [-1.0, 0.0], [0.0, -1.0]]
        }
    },
    "oracle": {"reward": [[1.0, 0.0, -0.5], [0.3, -0.4, 0.9]]},
    "hyperparams": {"beta": 1.0, "rho": 0.05, "horizon_t": 50},
    "seeds": [7],
    "outputs": {"dir": "out"}
}"#;

fn robust_sail(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_robust-sail"));
    cmd.arg("--quiet");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn header_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
}

#[test]
fn run_writes_three_artifacts_with_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = robust_sail(&["run"], Some(&config));
    assert!(out.status.success(), "{}", stderr(&out));
    let out_dir = dir.path().join("out");
    let trace = std::fs::read_to_string(out_dir.join("trace_seed7.csv")).unwrap();
    let plot = std::fs::read_to_string(out_dir.join("plot_data.csv")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let digest = header_value(&trace, "config_digest").unwrap();
    assert_eq!(digest.len(), 64);
    assert_eq!(header_value(&plot, "config_digest").as_deref(), Some(digest.as_str()));
    assert_eq!(summary["config_digest"], digest.as_str());
    assert_eq!(header_value(&trace, "seed").as_deref(), Some("7"));
    assert_eq!(summary["claim_manifest_version"], 1);
    assert_eq!(summary["per_seed"][0]["horizon_t"], 50);
    assert_eq!(plot.lines().filter(|l| !l.starts_with('#')).count(), 52);
    // every env_grad_norm cell is filled after the run
    let rows: Vec<&str> = trace.lines().skip_while(|l| l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 51);
    assert!(rows.iter().all(|l| !l.rsplit(',').nth(1).unwrap().is_empty()));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(robust_sail(&["--out-dir", a.to_str().unwrap(), "run"], Some(&config)).status.success());
    assert!(robust_sail(&["--out-dir", b.to_str().unwrap(), "--threads", "1", "run"], Some(&config)).status.success());
    for name in ["trace_seed7.csv", "plot_data.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn inadmissible_radius_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &MINIMAL.replace("\"rho\": 0.05", "\"rho\": 0.9"));
    let out = robust_sail(&["run"], Some(&config));
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("hyperparams.rho") && msg.contains("admissibility"), "{msg}");
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &MINIMAL.replace("\"horizon_t\": 50", "\"horizon_t\": -3"));
    let out = robust_sail(&["run"], Some(&config));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hyperparams.horizon_t"), "{}", stderr(&out));

    let config = write_config(dir.path(), &MINIMAL.replace("[0.0, -1.0]]", "[0.0, -1.0, 2.0]]"));
    let out = robust_sail(&["run"], Some(&config));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("environment"), "{}", stderr(&out));

    let out = robust_sail(&["run"], Some(&dir.path().join("missing.json")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let trace = dir.path().join("t.csv");
    let out = robust_sail(&["--seed", "3", "train", "--oracle-mode", "adversarial", "--log-exact-loss", "--out", trace.to_str().unwrap()], Some(&config));
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(header_value(&text, "oracle_mode").as_deref(), Some("adversarial"));

    let table = dir.path().join("env.csv");
    let out = robust_sail(
        &["--seed", "3", "envelope", "--trace", trace.to_str().unwrap(), "--eps-prox", "1e-9", "--out", table.to_str().unwrap()],
        Some(&config),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = std::fs::read_to_string(&table).unwrap();
    assert!(rows.contains("t,env_grad_norm,residual,inner_iters,env_value,identity_gap"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("env.json")).unwrap()).unwrap();
    assert!(summary["max_residual"].as_f64().unwrap() <= 1e-9);
    assert!(summary["mean_sq_env_grad"].as_f64().unwrap() <= summary["rate_bound"].as_f64().unwrap());
}

#[test]
fn constants_and_decomposition_emit_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = robust_sail(&["constants"], Some(&config));
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let kappa = v["kappa"].as_f64().unwrap();
    let lambda_env = v["lambda_env"].as_f64().unwrap();
    assert!((kappa * lambda_env - 0.5).abs() < 1e-12);
    assert_eq!(v["kappa_r"], 24.0);

    let out = robust_sail(&["decompose-check", "--instances", "20"], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r["abs_diff"].as_f64().unwrap() <= 1e-10));
}

#[test]
fn sweep_rho_writes_table_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = robust_sail(&["sweep-rho", "--rho", "0.02", "--rho", "0.1", "--probes", "4"], Some(&config));
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/sweep_rho.json")).unwrap()).unwrap();
    assert_eq!(report["rho_list"], serde_json::json!([0.0, 0.02, 0.1]));
    assert_eq!(report["rows"].as_array().unwrap().len(), 12);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));

    let out = robust_sail(&["sweep-rho", "--rho", "0.5"], Some(&config));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_reports_and_rejects_unknown_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.json");
    let out = robust_sail(&["verify", "--check", "counterexample", "--check", "decomposition", "--out", path.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);

    let out = robust_sail(&["verify", "--check", "no_such_check"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn subcommands_needing_a_config_say_so() {
    let out = robust_sail(&["run"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn file_sources_resolve_against_the_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("inputs");
    std::fs::create_dir(&sub).unwrap();
    let v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
    std::fs::write(sub.join("env.json"), v["environment"]["inline"].to_string()).unwrap();
    std::fs::write(sub.join("reward.json"), serde_json::json!({"reward": v["oracle"]["reward"]}).to_string()).unwrap();
    let text = MINIMAL
        .replace(r#""environment": {
        "inline": {
            "prompts": ["x0", "x1"],
            "responses": ["a", "b", "c"],
            "mu": [0.5, 0.5],
            "feature_dim": 2,
            "features": [[1.0, 0.0], [0.0, 1.0], [-0.5, 0.5], [0.5, 0.5], [-1.0, 0.0], [0.0, -1.0]]
        }
    },"#, r#""environment": {"file": "inputs/env.json"},"#)
        .replace(r#"{"reward": [[1.0, 0.0, -0.5], [0.3, -0.4, 0.9]]}"#, r#"{"file": "inputs/reward.json"}"#);
    let config = write_config(dir.path(), &text);
    let out = robust_sail(&["--seed", "7", "train"], Some(&config));
    assert!(out.status.success(), "{}", stderr(&out));
    let from_files = std::fs::read(dir.path().join("out/trace_seed7.csv")).unwrap();

    let inline_dir = tempfile::tempdir().unwrap();
    let config = write_config(inline_dir.path(), MINIMAL);
    assert!(robust_sail(&["--seed", "7", "train"], Some(&config)).status.success());
    let inline = std::fs::read_to_string(inline_dir.path().join("out/trace_seed7.csv")).unwrap();
    let from_files = String::from_utf8(from_files).unwrap();
    // same instance, so the same trajectory; only the digest line differs
    let body = |t: &str| t.lines().filter(|l| !l.starts_with("# config_digest")).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&from_files), body(&inline));
}
