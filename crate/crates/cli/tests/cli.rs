use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dla"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn build_to(dir: &Path, name: &str, args: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut full = vec!["build"];
    full.extend_from_slice(args);
    full.extend(["-o", path.to_str().unwrap()]);
    let out = dla(&full);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn report(path: &Path) -> Value {
    let out = dla(&["report", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn edit(src: &Path, dst: &Path, f: impl FnOnce(&mut Value)) {
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(src).unwrap()).unwrap();
    f(&mut doc);
    std::fs::write(dst, doc.to_string()).unwrap();
}

#[test]
fn build_writes_a_document() {
    let dir = tempfile::tempdir().unwrap();
    let path = build_to(dir.path(), "dla46c.json", &["DLA-46-C"]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["metadata"]["arch_name"], "DLA-46-C");
    assert_eq!(doc["format_version"], "1");
}

#[test]
fn build_prints_to_stdout_without_a_path() {
    let out = dla(&[
        "build",
        "DLA-34",
        "--width-cap",
        "8",
        "--input",
        "32x32x3",
        "--classes",
        "4",
    ]);
    assert_eq!(code(&out), 0);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["nodes"].as_array().unwrap().len() > 50);
}

#[test]
fn build_rejects_bad_arguments() {
    let out = dla(&["build", "DLA-99"]);
    assert_eq!(code(&out), 2);
    assert!(out.stdout.is_empty());
    assert!(stderr(&out).contains("DLA-99"));

    assert_eq!(code(&dla(&["build", "DLA-34", "--input", "225x224x3"])), 3);
    assert_eq!(code(&dla(&["build", "DLA-34", "--input", "224x224"])), 2);
}

#[test]
fn report_values_fall_in_their_bands() {
    let dir = tempfile::tempdir().unwrap();
    let compact = report(&build_to(dir.path(), "a.json", &["DLA-46-C"]));
    let params = compact["params"].as_f64().unwrap();
    assert!((1.17e6..=1.43e6).contains(&params), "{params}");
    assert_eq!(compact["per_stage_hda_depth"]["stage3"], 1);

    let split = report(&build_to(dir.path(), "b.json", &["DLA-X-60-C"]));
    let fmas = split["fmas"].as_f64().unwrap();
    assert!((0.50e9..=0.68e9).contains(&fmas), "{fmas}");
    for key in [
        "params",
        "fmas",
        "per_stage",
        "blocks",
        "agg_nodes",
        "max_root_fanin",
        "max_block_to_output_hops",
    ] {
        assert!(split.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn damaged_documents_exit_with_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = build_to(dir.path(), "a.json", &["DLA-34"]);
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 3]).unwrap();
    let out = dla(&["report", truncated.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(out.stdout.is_empty());

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(
        code(&dla(&[
            "export-dot",
            "--collapse",
            "blocks",
            empty.to_str().unwrap()
        ])),
        4
    );
    assert_eq!(
        code(&dla(&[
            "check",
            dir.path().join("missing.json").to_str().unwrap()
        ])),
        4
    );
}

#[test]
fn export_dot_collapses_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = build_to(dir.path(), "a.json", &["DLA-34"]);
    let full = stdout(&dla(&["export-dot", path.to_str().unwrap()]));
    let collapsed = dla(&["export-dot", "--collapse", "blocks", path.to_str().unwrap()]);
    assert_eq!(code(&collapsed), 0);
    let collapsed = stdout(&collapsed);
    assert!(collapsed.starts_with("digraph "));
    assert!(collapsed.trim_end().ends_with('}'));
    assert!(collapsed.lines().count() < full.lines().count());
    assert!(collapsed.contains("shape=diamond"));
}

#[test]
fn check_accepts_the_catalog_and_flags_edits() {
    let dir = tempfile::tempdir().unwrap();
    let good = build_to(dir.path(), "good.json", &["DLA-46-C"]);
    let out = dla(&["check", good.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(out.stdout.is_empty());

    let bad_channels = dir.path().join("channels.json");
    edit(&good, &bad_channels, |doc| {
        let conv = doc["nodes"]
            .as_array_mut()
            .unwrap()
            .iter_mut()
            .filter(|n| n["kind"] == "Conv")
            .nth(5)
            .unwrap();
        let c = conv["attrs"]["in_channels"].as_u64().unwrap();
        conv["attrs"]["in_channels"] = (c + 1).into();
    });
    let out = dla(&["check", bad_channels.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("ShapeConflict"), "{}", stdout(&out));

    let bad_depth = dir.path().join("depth.json");
    edit(&good, &bad_depth, |doc| {
        for n in doc["nodes"].as_array_mut().unwrap() {
            if n["tags"]["hda"]["id"] == 0 {
                n["tags"]["hda"]["depth"] = 2.into();
            }
        }
    });
    let out = dla(&["check", bad_depth.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(!out.stdout.is_empty());
}

#[test]
fn gradcheck_passes_on_the_toy_variant() {
    let out = dla(&[
        "gradcheck",
        "DLA-34",
        "--width-cap",
        "16",
        "--input",
        "16",
        "--tol",
        "1e-4",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn gradcheck_fails_on_a_corrupted_backward() {
    let quick = [
        "--input",
        "16",
        "--batch",
        "4",
        "--samples",
        "20",
        "--seed",
        "1",
    ];
    let mut args = vec!["gradcheck", "DLA-34"];
    args.extend(quick);
    args.push("--corrupt-backward");
    let out = dla(&args);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);

    let mut args = vec!["gradcheck", "DLA-34", "--tol", "0"];
    args.extend(quick);
    assert_eq!(code(&dla(&args)), 1);
}

#[test]
fn list_names_every_architecture() {
    let out = dla(&["list"]);
    assert_eq!(code(&out), 0);
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 9);
}
