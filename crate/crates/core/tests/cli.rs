use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mia-audit"))
}

fn config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pipeline.toml")
}

#[test]
fn stages_run_one_at_a_time_then_all_is_cached() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for stage in ["parse", "sage", "sage-r", "ft-f", "score", "attack", "eval", "audit"] {
        let o = bin()
            .args(["--config", config().to_str().unwrap(), "--out", out.to_str().unwrap(), stage])
            .output()
            .unwrap();
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["stages"][0]["stage"], stage);
    }
    for f in ["parsed.jsonl", "sage.jsonl", "sage_r.jsonl", "ft_f.jsonl", "report.md", "report.json", "audit.jsonl"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let o = bin()
        .args(["--config", config().to_str().unwrap(), "--out", out.to_str().unwrap(), "all"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["provider_calls"], 0);
    assert!(summary["stages"].as_array().unwrap().iter().all(|s| s["skipped"] == true));
}

#[test]
fn later_stage_without_inputs_reports_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["--config", config().to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "sage"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("parsed.jsonl"));
}

#[test]
fn missing_config_file_fails_cleanly() {
    let o = bin().args(["--config", "/nonexistent/mia.toml", "parse"]).output().unwrap();
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn overrides_change_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, extra: &[&str]| {
        let out = tmp.path().join(dir);
        let o = bin()
            .arg("--config")
            .arg(config())
            .arg("--out")
            .arg(&out)
            .args(extra)
            .arg("all")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("report.json")).unwrap()
    };
    let base = run("a", &[]);
    let loose = run("b", &["--fpr-target", "0.5", "--parallelism", "1"]);
    assert_ne!(base, loose);
}
