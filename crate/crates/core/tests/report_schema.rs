//! The report layout is versioned: any change to JSON keys or CSV columns
//! must bump the schema version and regenerate the golden files with
//! `UPDATE_GOLDEN=1 cargo test --test report_schema`.

use std::path::PathBuf;

use serde_json::Value;

use rollkv::harness::report::{FRAME_CSV_COLUMNS, SCHEMA_VERSION};
use rollkv::harness::{compare, run, RunConfig};
use rollkv::kvcache::EngineConfig;
use rollkv::{PolicyKind, StreamSpec};

fn config(policy: PolicyKind) -> RunConfig {
    let spec = StreamSpec { layers: 2, heads: 2, d_k: 8, d_v: 8, tokens_per_frame: 4, n_frames: 24, seed: 42, ..StreamSpec::calibration() };
    let engine = EngineConfig { layers: 2, heads: 2, d_k: 8, d_v: 8, tokens_per_frame: 4, b_init_per_head: 8, ..EngineConfig::default() };
    let mut cfg = RunConfig::synthetic(engine, spec, policy);
    cfg.fidelity_every = 6;
    cfg.track_oracle_overlap = true;
    cfg
}

/// Key names and value kinds, with values and array lengths dropped.
fn shape(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
        Value::Array(a) => Value::Array(a.first().map(shape).into_iter().collect()),
        Value::Number(_) => Value::String("number".into()),
        Value::String(_) => Value::String("string".into()),
        Value::Bool(_) => Value::String("bool".into()),
        Value::Null => Value::String("null".into()),
    }
}

fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "{name} drifted; bump SCHEMA_VERSION and regenerate");
}

#[test]
fn run_report_schema_is_stable() {
    let m = run(&config(PolicyKind::Diversity)).unwrap();
    let v: Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    assert_eq!(v["schema_version"], SCHEMA_VERSION);
    check_golden("run_report.shape.json", &serde_json::to_string_pretty(&shape(&v)).unwrap());
}

#[test]
fn run_report_values_are_pinned() {
    // fixed seed, timing removed: the whole report is reproducible
    let m = run(&config(PolicyKind::Random)).unwrap();
    check_golden("run_report.random.json", &m.deterministic_json().unwrap());
}

#[test]
fn frame_csv_columns_are_stable() {
    let m = run(&config(PolicyKind::Diversity)).unwrap();
    let mut buf = Vec::new();
    m.write_frame_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), FRAME_CSV_COLUMNS.join(","));
    assert_eq!(FRAME_CSV_COLUMNS, ["frame", "resident_tokens", "fidelity_error", "prune_ns"]);
    assert_eq!(lines.count(), 24);
}

#[test]
fn comparison_schema_is_stable() {
    let arms: Vec<(String, RunConfig)> = PolicyKind::ALL.iter().map(|&p| (p.to_string(), config(p))).collect();
    let c = compare(&arms).unwrap();
    let v: Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
    check_golden("comparison.shape.json", &serde_json::to_string_pretty(&shape(&v)).unwrap());
}
