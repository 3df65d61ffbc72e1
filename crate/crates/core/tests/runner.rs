use std::path::PathBuf;
use std::process::Command;

use fvlab::runner::{derive_seed, emit_report, ExperimentConfig, Table};
use fvlab::theory::TheoremReport;
use fvlab::Error;

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn field_of(cfg: &ExperimentConfig) -> String {
    match cfg.validate() {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn committed_default_config_matches_builtin() {
    let loaded = ExperimentConfig::load(&repo_file("configs/default.json")).unwrap();
    assert_eq!(loaded, ExperimentConfig::default());
    assert_eq!(loaded.hash(), ExperimentConfig::default().hash());
}

#[test]
fn hash_ignores_output_location_only() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.out_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.master_seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn validation_names_the_offending_field() {
    let base = ExperimentConfig::default();
    let mut c = base.clone();
    c.shots = vec![3, 0];
    assert_eq!(field_of(&c), "shots[1]");
    let mut c = base.clone();
    c.fv.top_k = Some(17);
    assert_eq!(field_of(&c), "fv.top_k");
    let mut c = base.clone();
    c.fv.aie_prompts = 9;
    assert_eq!(field_of(&c), "fv.aie_prompts");
    let mut c = base.clone();
    c.model.d_head = 7;
    assert_eq!(field_of(&c), "model");
    let mut c = base.clone();
    c.theory.overlap_fraction = 0.0;
    assert_eq!(field_of(&c), "theory.overlap_fraction");
    let mut c = base;
    c.sweep.l_prime = Some(4);
    assert_eq!(field_of(&c), "sweep.l_prime");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
    v["train"]["learning_rate"] = serde_json::json!(0.1);
    let path = dir.path().join("c.json");
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config { .. })));
}

#[test]
fn derived_seeds_depend_on_label_and_master() {
    assert_eq!(derive_seed(1, "train"), derive_seed(1, "train"));
    assert_ne!(derive_seed(1, "train"), derive_seed(1, "model-init"));
    assert_ne!(derive_seed(1, "train"), derive_seed(2, "train"));
}

#[test]
fn reports_are_deterministic_and_header_only_when_empty() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Table::new("empty", &["a", "b"]);
    emit_report(&empty, &serde_json::json!({}), dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("empty.csv")).unwrap(), "a,b\n");

    let mut t = Table::new("t", &["name", "x"]);
    t.push(vec!["p,q".into(), (1.0f64 / 3.0).into()]).unwrap();
    assert!(t.push(vec![1usize.into()]).is_err());
    let first = emit_report(&t, &serde_json::json!({ "k": 1 }), dir.path()).unwrap();
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    emit_report(&t, &serde_json::json!({ "k": 1 }), dir.path()).unwrap();
    for (p, b) in first.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), b);
    }
    assert_eq!(String::from_utf8(bytes[0].clone()).unwrap(), "name,x\n\"p,q\",0.333333333\n");
}

fn fvlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fvlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn run_theory_writes_a_parseable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = fvlab(&["run", "theory", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: TheoremReport = serde_json::from_slice(&std::fs::read(dir.path().join("theorem_report.json")).unwrap()).unwrap();
    assert!(report.passed);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], ExperimentConfig::default().hash());
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"master_seed\": 1}").unwrap();
    assert_eq!(fvlab(&["run", "theory", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(fvlab(&["run", "theory", "--threads", "0", "--out", dir.path().to_str().unwrap()]).status.code(), Some(1));
    let out = fvlab(&["run", "localize", "--out", dir.path().join("fresh").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train stage"));
}
