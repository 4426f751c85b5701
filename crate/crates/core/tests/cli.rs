//! End-to-end runs of the `aspan` binary: exit codes, determinism and
//! schema-valid artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn aspan(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aspan"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = aspan(args, &[]);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let s: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&s).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small model and data so every subcommand finishes in seconds.
fn tiny_config(dir: &Path, extra_train: Value) -> PathBuf {
    let mut train = json!({"epochs": 1, "batch_size": 2, "holdout": 1});
    train.as_object_mut().unwrap().extend(extra_train.as_object().unwrap().clone());
    let cfg = json!({
        "synth": {"height": 32, "width": 32, "n_pairs": 4},
        "model": {
            "backbone": {"in_channels": 1, "channels": [4, 8, 16], "fine_dim": 8},
            "gla": {"dim": 16, "num_blocks": 2, "coarse_extent": [2, 2], "samples_per_axis": 4},
            "train_extent": [32, 32]
        },
        "train": train,
        "bench_sizes": [32, 48, 64]
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Drops wall-clock fields, which are the only nondeterministic output.
fn strip_timing(mut v: Value) -> Value {
    match &mut v {
        Value::Object(m) => {
            m.retain(|k, _| !k.ends_with("seconds") && !k.ends_with("_ms"));
            for x in m.values_mut() {
                *x = strip_timing(x.take());
            }
        }
        Value::Array(a) => {
            for x in a.iter_mut() {
                *x = strip_timing(x.take());
            }
        }
        _ => {}
    }
    v
}

struct Fixture {
    tmp: TempDir,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({}));
    let data = tmp.path().join("data");
    ok(&["gen", "--config", config.to_str().unwrap(), "--seed", "7", "--out", data.to_str().unwrap()]);
    Fixture { tmp, config, data }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_schema_valid() {
    let f = fixture();
    let again = f.tmp.path().join("again");
    ok(&["gen", "--config", s(&f.config), "--seed", "7", "--out", s(&again)]);
    assert_eq!(dir_bytes(&f.data), dir_bytes(&again));
    let manifest = read_json(&f.data.join("manifest.json"));
    assert_valid("dataset_manifest.schema.json", &manifest);
    assert_eq!(manifest["pairs"].as_array().unwrap().len(), 4);

    let other = f.tmp.path().join("other");
    ok(&["gen", "--config", s(&f.config), "--seed", "8", "--out", s(&other)]);
    assert_ne!(dir_bytes(&f.data), dir_bytes(&other));
}

#[test]
fn validation_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"synth": {"height": 60, "width": 64}}"#).unwrap();
    let out = aspan(&["gen", "--config", s(&bad), "--out", s(&tmp.path().join("d"))], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of 8"));

    fs::write(&bad, r#"{"train": {"learning_rate": -1.0}}"#).unwrap();
    assert_eq!(aspan(&["bench", "--config", s(&bad)], &[]).status.code(), Some(2));
    assert_eq!(aspan(&["bench", "--out", s(tmp.path())], &[("ASPAN_THREADS", "0")]).status.code(), Some(2));
    assert_eq!(aspan(&["frobnicate"], &[]).status.code(), Some(2));
}

#[test]
fn numeric_blowup_exits_with_code_three() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({"learning_rate": 1e300, "warmup_epochs": 0, "epochs": 2}));
    let data = tmp.path().join("data");
    ok(&["gen", "--config", s(&config), "--out", s(&data)]);
    let run = tmp.path().join("run");
    let out = aspan(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = read_json(&run.join("nan_dump.json"));
    assert!(dump["pair_seeds"].as_array().is_some_and(|s| !s.is_empty()));
}

#[test]
fn train_match_eval_round_trip() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.tmp.path().join(name);
        ok(&["train", "--config", s(&f.config), "--seed", "3", "--data", s(&f.data), "--out", s(&out)]);
        out
    };
    let (r1, r2) = (run("run1"), run("run2"));
    assert_eq!(dir_bytes(&r1.join("weights")), dir_bytes(&r2.join("weights")));
    let m1 = read_json(&r1.join("metrics.json"));
    assert_valid("metrics.schema.json", &m1);
    assert_eq!(strip_timing(m1), strip_timing(read_json(&r2.join("metrics.json"))));

    // one thread and the default pool agree bitwise
    let single = f.tmp.path().join("single");
    let out = aspan(
        &["train", "--config", s(&f.config), "--seed", "3", "--data", s(&f.data), "--out", s(&single)],
        &[("ASPAN_THREADS", "1")],
    );
    assert!(out.status.success());
    assert_eq!(dir_bytes(&r1.join("weights")), dir_bytes(&single.join("weights")));

    let weights = r1.join("weights");
    let pair = f.data.join("pair_0");
    let matched = f.tmp.path().join("matched");
    ok(&["match", "--weights", s(&weights), s(&pair.join("image_a.aspt")), s(&pair.join("image_b.aspt")), "--viz", "--out", s(&matched)]);
    let text = fs::read_to_string(matched.join("matches.jsonl")).unwrap();
    for line in text.lines() {
        let m: Value = serde_json::from_str(line).unwrap();
        assert_valid("match_line.schema.json", &m);
        for key in ["x_a", "y_a", "x_b", "y_b"] {
            let v = m[key].as_f64().unwrap();
            assert!((0.0..=31.0).contains(&v), "{key} = {v} out of bounds");
        }
    }
    for fig in ["matches.ppm", "uncertainty.ppm", "spans.ppm"] {
        assert!(fs::read(matched.join(fig)).unwrap().starts_with(b"P6\n"), "{fig}");
    }
    let again = f.tmp.path().join("matched2");
    ok(&["match", "--weights", s(&weights), s(&pair.join("image_a.aspt")), s(&pair.join("image_b.aspt")), "--viz", "--out", s(&again)]);
    assert_eq!(dir_bytes(&matched), dir_bytes(&again));

    let e1 = f.tmp.path().join("eval1");
    let e2 = f.tmp.path().join("eval2");
    ok(&["eval", "--weights", s(&weights), "--data", s(&f.data), "--out", s(&e1)]);
    ok(&["eval", "--weights", s(&weights), "--data", s(&f.data), "--out", s(&e2)]);
    let report = read_json(&e1.join("eval.json"));
    assert_valid("eval.schema.json", &report);
    assert_eq!(report["n_pairs"], 4);
    assert_eq!(fs::read(e1.join("eval.json")).unwrap(), fs::read(e2.join("eval.json")).unwrap());
}

#[test]
fn match_at_other_resolution_uses_scaled_encoding() {
    let f = fixture();
    let run = f.tmp.path().join("run");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run)]);
    // a 48x48 scene, 1.5 times the training extent
    let big = f.tmp.path().join("big.json");
    fs::write(&big, r#"{"synth": {"height": 48, "width": 48, "n_pairs": 1}}"#).unwrap();
    let data = f.tmp.path().join("big");
    ok(&["gen", "--config", s(&big), "--out", s(&data)]);
    let pair = data.join("pair_0");
    let out = aspan(
        &["match", "--weights", s(&run.join("weights")), s(&pair.join("image_a.aspt")), s(&pair.join("image_b.aspt")), "--out", s(&f.tmp.path().join("m"))],
        &[("RUST_LOG", "info")],
    );
    assert!(out.status.success());
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("encoding scales (0.6666666666666666, 0.6666666666666666)"), "{log}");
}

#[test]
fn bench_counts_are_reproducible() {
    let f = fixture();
    let (b1, b2) = (f.tmp.path().join("b1"), f.tmp.path().join("b2"));
    let out = ok(&["bench", "--config", s(&f.config), "--out", s(&b1)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("log-log slope"));
    ok(&["bench", "--config", s(&f.config), "--out", s(&b2)]);
    let t = read_json(&b1.join("scaling.json"));
    assert_valid("scaling.schema.json", &t);
    assert_eq!(t["rows"].as_array().unwrap().len(), 3);
    assert_eq!(strip_timing(t), strip_timing(read_json(&b2.join("scaling.json"))));
}

#[test]
fn ablation_has_three_reproducible_rows() {
    let f = fixture();
    let (a1, a2) = (f.tmp.path().join("a1"), f.tmp.path().join("a2"));
    let out = ok(&["ablate", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&a1)]);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("SingleLevel") && table.contains("FixedSpan") && table.contains("AdaptiveSpan"));
    ok(&["ablate", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&a2)]);
    let r = read_json(&a1.join("ablation.json"));
    assert_valid("ablation.schema.json", &r);
    let modes: Vec<&str> = r["rows"].as_array().unwrap().iter().map(|row| row["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["single_level", "fixed_span", "adaptive_span"]);
    assert_eq!(fs::read(a1.join("ablation.json")).unwrap(), fs::read(a2.join("ablation.json")).unwrap());
}
