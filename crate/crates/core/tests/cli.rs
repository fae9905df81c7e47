use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "preprocess": {"factor_y": 2, "factor_x": 2},
  "phantom": {
    "geometry": {"ny": 40, "nx": 32, "dy": 6e-5, "dx": 3e-5, "dt": 0.002, "wavelength": 6e-5},
    "vessels": [{"start": [0.0004, 0.0003], "end": [0.002, 0.0006], "diameter": 0.0001, "speed": 0.01}],
    "mean_bubbles": 3, "nframes": 20, "mask_upsample": 2
  },
  "seed": 7,
  "persist_intermediates": true
}"#;

fn mrulm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrulm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mrulm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn same_file(a: &Path, b: &Path) {
    assert!(
        std::fs::read(a).unwrap() == std::fs::read(b).unwrap(),
        "{} differs from {}",
        a.display(),
        b.display()
    );
}

#[test]
fn stages_compose_to_run() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "run", "--out-dir", "out"]);
    ok(d, &["--config", "cfg.json", "synth", "--out", "raw.fst", "--mask", "m.fst"]);
    ok(d, &["--config", "cfg.json", "filter", "--input", "raw.fst", "--out", "f.fst"]);
    ok(d, &["--config", "cfg.json", "localize", "--input", "f.fst", "--out", "p.csv"]);
    ok(
        d,
        &["--config", "cfg.json", "render", "--peaks", "p.csv", "--reference", "f.fst", "--out", "sr.pgm"],
    );
    same_file(&d.join("out/filtered.fst"), &d.join("f.fst"));
    same_file(&d.join("out/mask.fst"), &d.join("m.fst"));
    same_file(&d.join("out/peaks.csv"), &d.join("p.csv"));
    same_file(&d.join("out/sr.pgm"), &d.join("sr.pgm"));
    same_file(&d.join("out/sr.json"), &d.join("sr.json"));
}

#[test]
fn repeated_runs_are_identical_across_thread_counts() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "--threads", "1", "run", "--out-dir", "a"]);
    ok(d, &["--config", "cfg.json", "--threads", "3", "run", "--out-dir", "b"]);
    for f in ["peaks.csv", "sr.pgm", "filtered.fst"] {
        same_file(&d.join("a").join(f), &d.join("b").join(f));
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a/report.json")).unwrap()).unwrap();
    assert!(report["n_localizations"].as_u64().unwrap() > 0);
    assert_eq!(report["nframes"], 20);
}

#[test]
fn evaluate_and_track_read_pipeline_outputs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "run", "--out-dir", "out"]);
    let out = ok(
        d,
        &["evaluate", "--peaks", "out/peaks.csv", "--mask", "out/mask.fst", "--tolerances-um", "0,20,50"],
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("fraction_within"), "{text}");
    ok(d, &["track", "--peaks", "out/peaks.csv", "--out", "v.csv", "--dt", "0.002"]);
    let csv = std::fs::read_to_string(d.join("v.csv")).unwrap();
    assert!(csv.starts_with("frame,y_m,x_m,vy_mps,vx_mps"));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    // missing input file
    assert_eq!(mrulm(d, &["filter", "--input", "nope.fst", "--out", "x.fst"]).status.code(), Some(3));
    // malformed input file
    std::fs::write(d.join("junk.fst"), b"not a stack").unwrap();
    assert_eq!(mrulm(d, &["filter", "--input", "junk.fst", "--out", "x.fst"]).status.code(), Some(3));
    // invalid parameter
    ok(d, &["--config", "cfg.json", "synth", "--out", "raw.fst"]);
    let bad_h = mrulm(d, &["localize", "--input", "raw.fst", "--out", "p.csv", "--h", "2"]);
    assert_eq!(bad_h.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&bad_h.stderr).is_empty());
    // usage errors
    assert_eq!(mrulm(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mrulm(d, &["track", "--peaks", "p.csv", "--out", "v.csv"]).status.code(), Some(2));
}
