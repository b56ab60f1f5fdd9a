use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn acckv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acckv")).args(args).output().expect("spawn acckv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, name: &str, seed: u64) -> (PathBuf, Output) {
    let path = dir.join(name);
    let seed = seed.to_string();
    let out = acckv(&[
        "gen",
        "--video",
        "20",
        "--audio",
        "12",
        "--text",
        "6",
        "--layers",
        "8",
        "--dk",
        "16",
        "--regime",
        "video-convergent",
        "--seed",
        &seed,
        "-o",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (path, out)
}

fn checksum(o: &Output) -> String {
    stdout(o).lines().find_map(|l| l.strip_prefix("sha256 ")).unwrap().to_string()
}

#[test]
fn gen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (_, a) = gen(dir.path(), "a.avtrace", 3);
    let (_, b) = gen(dir.path(), "b.avtrace", 3);
    let (_, c) = gen(dir.path(), "c.avtrace", 4);
    assert_eq!(checksum(&a), checksum(&b));
    assert_ne!(checksum(&a), checksum(&c));
}

#[test]
fn gen_rejects_empty_text() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.avtrace");
    let o = acckv(&[
        "gen",
        "--video",
        "4",
        "--audio",
        "4",
        "--text",
        "0",
        "--layers",
        "2",
        "--dk",
        "4",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn report(trace: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["compress", trace.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = acckv(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn full_cache_keeps_everything() {
    let dir = TempDir::new().unwrap();
    let (t, _) = gen(dir.path(), "t.avtrace", 1);
    let r = report(&t, &["--policy", "full"]);
    assert_eq!(r["aggregate"]["retained_token_ratio"].as_f64(), Some(1.0));
    assert_eq!(r["aggregate"]["final_rows"], r["aggregate"]["total_rows"]);
}

#[test]
fn acckv_report_and_compacted_cache() {
    let dir = TempDir::new().unwrap();
    let (t, _) = gen(dir.path(), "t.avtrace", 1);
    let kv = dir.path().join("t.avkv");
    let r = report(
        &t,
        &["--policy", "acckv", "--budget", "0.2", "--tau", "0.9", "--kv-out", kv.to_str().unwrap()],
    );
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["policy"], "acckv");
    assert_eq!(r["config"]["budget_k"], 7);
    assert_eq!(r["aggregate"]["budget_violations"], 0);
    let layers = r["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 8);
    for layer in layers {
        let kept = layer["retained_video"].as_u64().unwrap() + layer["retained_audio"].as_u64().unwrap();
        assert!(kept <= 7);
    }
    let caches = acckv::trace::read_compacted(&kv).unwrap();
    assert_eq!(caches.len(), 8);
    for (cache, layer) in caches.iter().zip(layers) {
        assert_eq!(cache.len() as u64, layer["final_rows"].as_u64().unwrap());
    }
}

#[test]
fn report_can_go_to_a_file() {
    let dir = TempDir::new().unwrap();
    let (t, _) = gen(dir.path(), "t.avtrace", 1);
    let out = dir.path().join("r.json");
    let o = acckv(&[
        "compress",
        t.to_str().unwrap(),
        "--policy",
        "evict-audio-high",
        "--report",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(r["policy"], "evict-audio-high");
    assert_eq!(r["config"]["high_layer_start"], 4);
    let audio = r["aggregate"]["audio_retention"].as_array().unwrap();
    assert!(audio[..4].iter().all(|v| v.as_f64() == Some(1.0)));
    assert!(audio[4..].iter().all(|v| v.as_f64() == Some(0.0)));
}

#[test]
fn config_and_budget_errors_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    let (t, _) = gen(dir.path(), "t.avtrace", 1);
    let t = t.to_str().unwrap();
    assert_eq!(acckv(&["compress", t, "--tau", "1.01"]).status.code(), Some(2));
    assert_eq!(acckv(&["compress", t, "--policy", "bogus"]).status.code(), Some(2));
    assert_eq!(acckv(&["compress", t, "--budget", "100"]).status.code(), Some(3));
    let missing = dir.path().join("missing.avtrace");
    assert_eq!(acckv(&["compress", missing.to_str().unwrap()]).status.code(), Some(4));
    let junk = dir.path().join("junk.avtrace");
    std::fs::write(&junk, b"not a trace").unwrap();
    assert_eq!(acckv(&["compress", junk.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn tau_sweep_is_monotone() {
    let dir = TempDir::new().unwrap();
    let (t, _) = gen(dir.path(), "t.avtrace", 2);
    let csv_path = dir.path().join("sweep.csv");
    let o = acckv(&["sweep", t.to_str().unwrap(), "--budget", "0.2", "-o", csv_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (tau, rows, ratio) = (col("tau"), col("final_rows"), col("multimodal_retained_ratio"));
    let records: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 11);
    for pair in records.windows(2) {
        let t0: f64 = pair[0][tau].parse().unwrap();
        let t1: f64 = pair[1][tau].parse().unwrap();
        assert!(t0 < t1);
        let r0: usize = pair[0][rows].parse().unwrap();
        let r1: usize = pair[1][rows].parse().unwrap();
        assert!(r1 <= r0, "final rows grew from {r0} to {r1}");
        let m0: f64 = pair[0][ratio].parse().unwrap();
        let m1: f64 = pair[1][ratio].parse().unwrap();
        assert!(m1 <= m0);
    }
}

#[test]
fn sweep_covers_policy_budget_grid() {
    let dir = TempDir::new().unwrap();
    let (t, _) = gen(dir.path(), "t.avtrace", 2);
    let o = acckv(&[
        "sweep",
        t.to_str().unwrap(),
        "--policy",
        "acckv,h2o,snapkv",
        "--budget",
        "0.1,0.5,10",
        "--tau",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1 + 9);
}

#[test]
fn verify_proof_passes_and_detects_faults() {
    let ok = acckv(&["verify-proof", "--max-l", "256"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("PASS"));
    let bad = acckv(&["verify-proof", "--max-l", "16", "--inject-fault", "8,7,3"]);
    assert_eq!(bad.status.code(), Some(5));
    assert!(stdout(&bad).contains("FAIL l=8 column=3"));
}

fn cost_json(l: &str, n: &str, dk: &str) -> serde_json::Value {
    let o = acckv(&["cost", "--l", l, "--n", n, "--dk", dk, "--json"]);
    assert!(o.status.success());
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn cost_examples() {
    let v = cost_json("10", "3", "4");
    assert_eq!(v["cost_raw"].as_f64(), Some(528.0));
    assert_eq!(v["oracle_match"], true);
    assert_eq!(cost_json("1", "1", "1")["cost_raw"].as_f64(), Some(4.0));
    let big = cost_json("2210", "1000", "128");
    assert!(big["savings"]["exact"].as_f64().unwrap() > 0.0);
    assert!(big["savings"]["per_token_form"].as_f64().unwrap() > 0.0);
    assert_eq!(acckv(&["cost", "--l", "0", "--n", "1", "--dk", "1"]).status.code(), Some(2));
    assert!(stdout(&acckv(&["cost", "--l", "10", "--n", "3", "--dk", "4"])).contains("oracle          OK"));
}
