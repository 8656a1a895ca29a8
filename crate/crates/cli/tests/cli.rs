//! The `emogist` binary driven through a TOML config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const LABELS: [&str; 2] = ["awe", "fear"];

fn write_manifest(dir: &Path) {
    let mut lines = Vec::new();
    for (li, label) in LABELS.iter().enumerate() {
        for (split, n) in [("train", 6), ("test", 2)] {
            for j in 0..n {
                let mut v = vec![0.05 * j as f32; 4];
                v[li] = 1.0;
                lines.push(format!(
                    r#"{{"id": "{label}-{split}-{j}", "uri": "mem://{label}-{split}-{j}", "labels": ["{label}"], "split": "{split}", "vector": {v:?}}}"#
                ));
            }
        }
    }
    fs::write(dir.join("manifest.jsonl"), lines.join("\n")).unwrap();
}

fn write_config(dir: &Path, mode: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
store_dir = "{store}"
manifest = "{manifest}"
output_dir = "{out}"
mode = "{mode}"
k = 1
seeds = [21, 42]

[task]
kind = "multiclass"
labels = ["awe", "fear"]

[generator]
kind = "generator"
mock = {{ kind = "template", template = "Felt as <<{{label}}>>." }}

[classifier]
kind = "generator"
mock = {{ kind = "marker_oracle" }}
"#,
        store = dir.join("store").display(),
        manifest = dir.join("manifest.jsonl").display(),
        out = dir.join("out").display(),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn emogist(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emogist"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_run_from_toml() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path());
    let config = write_config(dir.path(), "emogist_n");

    let ingest: serde_json::Value =
        serde_json::from_str(&ok(&emogist(&config, &["ingest"]))).unwrap();
    assert_eq!(ingest["records"], 16);
    ok(&emogist(&config, &["cluster"]));
    let describe: serde_json::Value =
        serde_json::from_str(&ok(&emogist(&config, &["describe"]))).unwrap();
    assert_eq!(describe["descriptions"], 4);
    ok(&emogist(&config, &["classify"]));
    let table = ok(&emogist(&config, &["evaluate"]));
    assert!(table.contains("100.000"), "{table}");
    assert!(dir.path().join("out/reports/emogist_n_k1.json").exists());
    assert!(dir.path().join("out/artifacts.json").exists());
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path());
    let config = write_config(dir.path(), "emogist_n");
    ok(&emogist(
        &config,
        &["--mode", "zero_shot", "--seeds", "7", "classify"],
    ));
    assert!(dir
        .path()
        .join("out/predictions/test/zero_shot_seed7.jsonl")
        .exists());
    let log = dir
        .path()
        .join("out/predictions/test/zero_shot_seed7.jsonl");
    let table = ok(&emogist(
        &config,
        &[
            "--mode",
            "zero_shot",
            "evaluate",
            "--log",
            log.to_str().unwrap(),
        ],
    ));
    assert!(table.contains("zero_shot"), "{table}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path());
    let config = write_config(dir.path(), "emogist_n");

    // configuration: unknown key, missing file, bad override
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        fs::read_to_string(&config)
            .unwrap()
            .replace("k = 1", "k = 1\nbogus = 3"),
    )
    .unwrap();
    assert_eq!(emogist(&bad, &["cluster"]).status.code(), Some(2));
    assert_eq!(
        emogist(&dir.path().join("absent.toml"), &["cluster"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        emogist(&config, &["--k", "0", "cluster"]).status.code(),
        Some(2)
    );

    // data: context missing before describe, duplicate manifest ids
    ok(&emogist(&config, &["ingest"]));
    let out = emogist(&config, &["classify"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("describe"));

    let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let first = text.lines().next().unwrap().to_string();
    fs::write(
        dir.path().join("manifest.jsonl"),
        format!("{text}\n{first}"),
    )
    .unwrap();
    let out = emogist(&config, &["ingest"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("awe-train-0"));
}

#[test]
fn unreachable_backend_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path());
    let config = write_config(dir.path(), "zero_shot");
    let text = fs::read_to_string(&config).unwrap().replace(
        "[classifier]\nkind = \"generator\"\nmock = { kind = \"marker_oracle\" }",
        "[classifier]\nkind = \"generator\"\nendpoint = \"http://127.0.0.1:9/v1\"\nmodel_name = \"m\"\nretry = 0\ntimeout_secs = 2.0",
    );
    fs::write(&config, text).unwrap();
    let out = emogist(&config, &["--seeds", "1", "classify"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
