//! End-to-end runs of the `earthmatch` binary.

use std::path::Path;
use std::process::{Command, Output};

const SIDE: &str = "256";

fn earthmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earthmatch"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, n: &str, negatives: &str) -> String {
    let out = dir.to_str().unwrap();
    let o = earthmatch(&[
        "synth-gen",
        "--n",
        n,
        "--negatives",
        negatives,
        "--seed",
        "7",
        "--base-side",
        SIDE,
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).trim().to_string()
}

fn manifest(path: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_gen_is_deterministic_and_labels_negatives() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb) = (synth(a.path(), "2", "1"), synth(b.path(), "2", "1"));
    let (ja, jb) = (manifest(&ma), manifest(&mb));
    assert_eq!(ja["queries"], jb["queries"]);
    let labels: Vec<bool> = ja["queries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|q| q["candidates"][0]["is_positive"].as_bool().unwrap())
        .collect();
    assert_eq!(labels, [true, true, false]);
    for q in ja["queries"].as_array().unwrap() {
        let rel = q["image_path"].as_str().unwrap();
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap()
        );
    }
}

#[test]
fn bench_reports_and_exports_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "3", "1");
    let outcomes = dir.path().join("outcomes.csv");
    let o = earthmatch(&[
        "bench",
        "--manifest",
        &m,
        "--image-side",
        SIDE,
        "--outcomes",
        outcomes.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(&row[..2], ["builtin", "100.0"]);
    let csv = std::fs::read_to_string(&outcomes).unwrap();
    assert!(csv.starts_with("query_id,candidate_rank,inlier_count,is_true_positive"));
    assert_eq!(csv.lines().filter(|l| l.ends_with(",true")).count(), 3);

    // No false positives in the run → the threshold is disabled.
    let o = earthmatch(&[
        "calibrate",
        "--outcomes",
        outcomes.to_str().unwrap(),
        "--image-side",
        SIDE,
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["disabled_reason"], "no false positives");
    assert!(v.get("t_inl").is_none());

    let json = dir.path().join("report.json");
    let o = earthmatch(&[
        "bench",
        "--manifest",
        &m,
        "--image-side",
        SIDE,
        "--format",
        "json",
        "--mode",
        "exhaust-all",
        "--workers",
        "2",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["mode"], "exhaust-all");
    assert_eq!(r["total"], 4);
    assert_eq!(r["percent_of_localizable"], 100.0);
}

#[test]
fn calibrate_separable_outcomes_and_threshold_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("o.csv");
    let mut text = String::from("query_id,candidate_rank,inlier_count,is_true_positive\n");
    for i in 0..20 {
        text += &format!("n{i},1,{},false\n", 4 + i % 6);
        text += &format!("p{i},1,{},true\n", 60 + i);
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("t.json");
    let o = earthmatch(&[
        "calibrate",
        "--outcomes",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let t = v["t_inl"].as_u64().unwrap();
    assert!(t > 9 && t <= 60, "t_inl {t}");
    assert_eq!(v["matcher"], "builtin");
    assert_eq!(v["config"]["image_side"], 768);

    std::fs::write(&csv, "").unwrap();
    assert_eq!(
        earthmatch(&["calibrate", "--outcomes", csv.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn localize_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(&synth(dir.path(), "1", "1"));
    let candidates = |q: &serde_json::Value, name: &str| {
        let path = dir.path().join(name);
        std::fs::write(&path, serde_json::json!({ "candidates": q["candidates"] }).to_string()).unwrap();
        path
    };
    let run = |q: &serde_json::Value, cands: &Path| {
        let query = dir.path().join(q["image_path"].as_str().unwrap());
        earthmatch(&[
            "localize",
            "--query",
            query.to_str().unwrap(),
            "--candidates",
            cands.to_str().unwrap(),
            "--image-side",
            SIDE,
        ])
    };
    let (pos, neg) = (&m["queries"][0], &m["queries"][1]);

    let o = run(pos, &candidates(pos, "pos.json"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["status"], "Localized");
    assert_eq!(r["footprint"].as_array().unwrap().len(), 4);

    assert_eq!(run(neg, &candidates(neg, "neg.json")).status.code(), Some(2));
    assert_eq!(run(pos, &dir.path().join("missing.json")).status.code(), Some(1));
}

#[test]
fn flag_errors_and_help() {
    assert_eq!(earthmatch(&["bench", "--bogus"]).status.code(), Some(1));
    assert_eq!(earthmatch(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        earthmatch(&["bench", "--manifest", "/nonexistent/manifest.json"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        earthmatch(&["bench", "--manifest", "x", "--matcher", "no-such-matcher"])
            .status
            .code(),
        Some(1)
    );
    let help = earthmatch(&["bench", "--help"]);
    assert!(help.status.success());
    let text = stdout(&help);
    for flag in [
        "--manifest",
        "--matcher",
        "--image-side",
        "--max-keypoints",
        "--seed",
        "--threshold-file",
        "--mode",
        "--workers",
        "--format",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}
