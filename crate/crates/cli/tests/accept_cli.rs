use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn lamlab(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_lamlab")).args(args).output().unwrap();
    let report = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap(), report)
}

fn decompose_into(path: &Path, extra: &[&str]) -> (i32, Value) {
    let mut args = vec!["decompose", "--refine", "1", "--seed", "4", "--out", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    lamlab(&args)
}

#[test]
fn identical_components_decompose_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    for exact in [false, true] {
        let path = dir.path().join(format!("run{exact}.lamlab.json"));
        let mut extra = vec!["--instance", "identical"];
        if exact {
            extra.push("--exact");
        }
        let (code, report) = decompose_into(&path, &extra);
        assert_eq!(code, 0, "{report}");
        assert_eq!(report["outcome"], "converged");
        assert_eq!(report["iterations"], 0);
        let (code, verdict) = lamlab(&["verify", "--in", path.to_str().unwrap()]);
        assert_eq!(code, 0, "{verdict}");
        assert_eq!(verdict["valid"], true);
        let (code, summary) = lamlab(&["report", "--in", path.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert_eq!(summary["outcome"], "converged");
    }
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["identical", "random"] {
        let a = dir.path().join(format!("{kind}-a.lamlab.json"));
        let b = dir.path().join(format!("{kind}-b.lamlab.json"));
        let (ca, _) = decompose_into(&a, &["--instance", kind]);
        let (cb, _) = decompose_into(&b, &["--instance", kind]);
        assert_eq!(ca, cb);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{kind}");
    }
}

#[test]
fn capped_search_fails_honestly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("capped.lamlab.json");
    let (code, report) = decompose_into(&path, &["--instance", "random", "--max-iter", "1"]);
    assert_eq!(code, 3);
    assert_eq!(report["outcome"], "failed");
    assert_eq!(report["status"], "error");
    assert_eq!(report["error"]["kind"], "non-convergence");
    assert!(report["reason"]["kind"].is_string());
    assert!(report["certificate_path"].is_null());
    let (code, _) = lamlab(&["verify", "--in", path.to_str().unwrap()]);
    assert_eq!(code, 4, "no certificate to verify");
}

#[test]
fn configuration_errors_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.lamlab.json");
    assert_eq!(decompose_into(&path, &["--max-iter", "0"]).0, 4);
    assert_eq!(lamlab(&["decompose", "--instance", "wobbly"]).0, 4);
    assert_eq!(lamlab(&["verify", "--in", "/nonexistent/bundle.lamlab.json"]).0, 4);
    let (code, report) = lamlab(&["decompose", "--depth", "1"]);
    assert_eq!(code, 4);
    assert_eq!(report["error"]["kind"], "io-or-config");
}

#[test]
fn tampered_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.lamlab.json");
    assert_eq!(decompose_into(&path, &["--instance", "identical", "--exact"]).0, 0);
    let text = fs::read_to_string(&path).unwrap().replacen("\"seed\": \"4\"", "\"seed\": \"5\"", 1);
    fs::write(&path, text).unwrap();
    let (code, report) = lamlab(&["verify", "--in", path.to_str().unwrap()]);
    assert_eq!(code, 4);
    assert!(report["error"]["reason"].as_str().unwrap().contains("hash"));
}

#[test]
fn oracle_comparison_on_the_coarse_mesh() {
    let (code, report) = lamlab(&["oracle-compare", "--refine", "0", "--count", "20"]);
    assert_eq!(code, 0);
    assert_eq!(report["agreement"], "20/20");
}

#[test]
fn jensen_gap_of_det_vanishes() {
    let (code, report) = lamlab(&["jensen", "--refine", "1", "--functions", "det,frobenius"]);
    assert_eq!(code, 0, "{report}");
}
