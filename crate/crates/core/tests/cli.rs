use std::path::Path;
use std::process::Command;

use ghostnet::experiment::{ExperimentConfig, ExperimentPreset, Manifest};
use serde_json::Value;

fn ghostnet(out: &Path, args: &[&str]) -> (i32, String, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_ghostnet"))
        .env("GHOSTNET_OUT", out)
        .args(args)
        .output()
        .unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn error_kind(stderr: &str) -> String {
    let v: Value = serde_json::from_str(stderr.trim()).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn errors_are_distinct_json_records() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = ghostnet(dir.path(), &["experiment", "s7"]);
    assert_eq!(code, 1);
    assert_eq!(error_kind(&err), "unknown_preset");

    let (code, _, err) = ghostnet(dir.path(), &["evaluate", "--adversarial", "x.gdat", "--model", "absent.gnet"]);
    assert_ne!(code, 0);
    assert_eq!(error_kind(&err), "data");

    let (code, _, err) = ghostnet(dir.path(), &["gen-data", "--count", "200", "--task", "blobs-kd"]);
    assert_eq!(code, 0, "{err}");
    let data = dir.path().join("data/blobs-kd-0.gdat");
    let (code, _, err) = ghostnet(
        dir.path(),
        &["attack", "--data", data.to_str().unwrap(), "--model", "absent.gnet"],
    );
    assert_eq!(code, 1);
    assert_eq!(error_kind(&err), "missing_model");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 3, "colour": "red"}"#).unwrap();
    let (code, _, err) = ghostnet(dir.path(), &["experiment", "s1", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert_eq!(error_kind(&err), "schema_mismatch");

    let (code, _, err) = ghostnet(dir.path(), &["no-such-command"]);
    assert_eq!(code, 2);
    assert_eq!(error_kind(&err), "usage");
}

#[test]
fn gen_data_and_train_write_hashed_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let (code, _, err) = ghostnet(out, &["gen-data", "--task", "spirals-2d", "--count", "400", "--noise", "0", "--seed", "5"]);
    assert_eq!(code, 0, "{err}");
    let data = out.join("data/spirals-2d-5.gdat");
    let (code, stdout, err) = ghostnet(
        out,
        &["train", "--data", data.to_str().unwrap(), "--preset", "plain-mlp", "--name", "p", "--epochs", "2", "--seed", "5"],
    );
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("val_accuracy="));

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("models/p.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.seeds["init"], 5);
    let gnet = std::fs::read(out.join("models/p.gnet")).unwrap();
    assert_eq!(manifest.outputs[0].sha256, ghostnet::experiment::sha256_hex(&gnet));
    let gdat = std::fs::read(&data).unwrap();
    assert_eq!(manifest.inputs[0].sha256, ghostnet::experiment::sha256_hex(&gdat));

    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    ghostnet(again.path(), &["gen-data", "--task", "spirals-2d", "--count", "400", "--noise", "0", "--seed", "5"]);
    assert_eq!(std::fs::read(again.path().join("data/spirals-2d-5.gdat")).unwrap(), gdat);
}

#[test]
fn report_on_empty_root_has_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = ghostnet(dir.path(), &["report"]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("| experiment |"));
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn shipped_config_loads_and_matches_the_schema_keys() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let cfg = ExperimentConfig::load(&root.join("configs/desk-m6.json")).unwrap();
    assert_eq!(cfg, ExperimentConfig::desk(ExperimentPreset::M6, 0));

    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("schemas/experiment-config.schema.json")).unwrap())
            .unwrap();
    // Every serialized key (with optional fields filled) is declared, and
    // every required key is emitted.
    let mut full = cfg.clone();
    full.max_images = Some(10);
    full.attack.alpha = Some(1.0);
    full.attack.iterations = Some(10);
    full.plan.weights = Some(vec![1.0 / 3.0; 3]);
    for m in &mut full.models {
        m.erosion = Some(ghostnet::erosion::ErosionKind::Dropout);
        m.magnitude = Some(0.2);
    }
    check(&serde_json::to_value(&full).unwrap(), &schema, "$");
}

fn check(value: &Value, schema: &Value, at: &str) {
    if let Some(items) = schema.get("items") {
        for (i, v) in value.as_array().unwrap().iter().enumerate() {
            check(v, items, &format!("{at}[{i}]"));
        }
    }
    let Some(props) = schema.get("properties").and_then(Value::as_object) else {
        if let Some(options) = schema.get("enum").and_then(Value::as_array) {
            assert!(options.contains(value), "{at}: {value} not in {options:?}");
        }
        return;
    };
    let obj = value.as_object().unwrap_or_else(|| panic!("{at} is not an object"));
    for key in obj.keys() {
        assert!(props.contains_key(key), "{at}.{key} missing from the schema");
        check(&obj[key], &props[key], &format!("{at}.{key}"));
    }
    for req in schema["required"].as_array().into_iter().flatten() {
        assert!(obj.contains_key(req.as_str().unwrap()), "{at}.{req} is required but not emitted");
    }
    for key in props.keys() {
        assert!(obj.contains_key(key), "{at}.{key} declared but never emitted");
    }
}
