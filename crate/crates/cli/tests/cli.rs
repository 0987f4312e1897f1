use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fmg-audit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "synth failed: {}", stderr(&o));
}

#[test]
fn synth_writes_frames_and_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("burst");
    synth(
        &dir,
        &["--kind", "burst", "--n", "12", "--size", "48x32", "--bursts", "3:4", "--shift", "2,0", "--seed", "7"],
    );
    let frames = fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(frames, 12);
    let gt: Value = serde_json::from_str(&fs::read_to_string(dir.join("ground_truth.json")).unwrap()).unwrap();
    let mags: Vec<f64> = gt["magnitudes"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(mags.len(), 11);
    assert_eq!(mags[3], 2.0);
    assert_eq!(mags[4], 2.0);
    assert_eq!(mags[5], 0.0);
}

#[test]
fn synth_rejects_unknown_kind_as_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--kind", "zoom", "--n", "4", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown fixture kind"));
}

#[test]
fn flow_stats_on_identical_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    synth(&dir, &["--kind", "constant", "--n", "2", "--size", "40x40"]);
    let a = dir.join("frame_00000.png");
    let b = dir.join("frame_00001.png");
    let dump = tmp.path().join("flow.bin");
    let o = run(&[
        "flow",
        "--a",
        a.to_str().unwrap(),
        "--b",
        b.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
        "--stats",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(stats["mean"].as_f64().unwrap() < 1e-6);
    assert!(stats["max"].as_f64().unwrap() < 1e-6);
    let bytes = fs::read(&dump).unwrap();
    assert_eq!(&bytes[..4], b"FMGF");
    assert_eq!(bytes.len(), 12 + 40 * 40 * 8);
}

#[test]
fn sample_outputs_contract_fields_and_exports_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    synth(
        &dir,
        &["--kind", "burst", "--n", "40", "--size", "64x48", "--bursts", "10:12,28:30", "--shift", "3,0"],
    );
    let out = tmp.path().join("sample.json");
    let export = tmp.path().join("export");
    let o = run(&[
        "sample",
        "--input",
        dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--export-frames",
        export.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["video", "n", "params", "scores", "scores_smooth", "peaks", "indices", "provenance"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["n"], 40);
    assert_eq!(v["scores"].as_array().unwrap().len(), 39);
    let indices: Vec<u64> = v["indices"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(indices.len(), 10);
    for i in &indices {
        assert!(export.join(format!("idx_{i:05}.png")).exists());
    }
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    synth(&dir, &["--kind", "translate", "--n", "20", "--size", "48x48", "--shift", "2,1", "--at", "8"]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"log_level": "error", "sample": {"m": 4, "k": 2}}"#).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "sample", "--input", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["indices"].as_array().unwrap().len(), 4);
    assert_eq!(v["params"]["k"], 2);

    let o = run(&["--config", cfg.to_str().unwrap(), "sample", "--input", dir.to_str().unwrap(), "--m", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["indices"].as_array().unwrap().len(), 6);
}

#[test]
fn score_reports_one_value_per_transition() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    synth(&dir, &["--kind", "translate", "--n", "6", "--size", "48x48", "--shift", "2,0", "--at", "2"]);
    let o = run(&["score", "--input", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let scores: Vec<f64> = v["scores"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(scores.len(), 5);
    let argmax = scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax, 2);
}

fn write_fixture_root(root: &Path) {
    for (i, name) in ["clip_a", "clip_b", "clip_c"].iter().enumerate() {
        let seed = (i + 1).to_string();
        synth(
            &root.join(name),
            &["--kind", "burst", "--n", "16", "--size", "48x32", "--bursts", "5:6", "--shift", "2,0", "--seed", &seed],
        );
        fs::remove_file(root.join(name).join("ground_truth.json")).unwrap();
    }
}

const ANNOTATIONS: &str = r#"{"video_id": "clip_a", "labels": {"texture_corruption": true, "object_deformation": false, "flicker": false, "motion_discontinuity": true, "unstable_trajectory": false, "implausible_parallax": false}}
{"video_id": "clip_b", "labels": {"texture_corruption": false, "object_deformation": false, "flicker": true, "motion_discontinuity": false, "unstable_trajectory": false, "implausible_parallax": false}}
{"video_id": "clip_c", "labels": {"texture_corruption": false, "object_deformation": false, "flicker": false, "motion_discontinuity": false, "unstable_trajectory": true, "implausible_parallax": false}}
"#;

#[test]
fn audit_end_to_end_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("videos");
    write_fixture_root(&root);
    let ann = tmp.path().join("ann.jsonl");
    fs::write(&ann, ANNOTATIONS).unwrap();
    let report = tmp.path().join("report.json");
    let preds = tmp.path().join("preds.jsonl");
    let o = run(&[
        "--jobs",
        "2",
        "audit",
        "--input",
        root.to_str().unwrap(),
        "--annotations",
        ann.to_str().unwrap(),
        "--scratch",
        tmp.path().join("scratch").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--predictions-out",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["videos"].as_array().unwrap().len(), 3);
    // 4 true labels among 18 pairs; always_no scores the false ones.
    let all = v["eval"]["acc"]["all"].as_f64().unwrap();
    assert_eq!(all, 14.0 / 18.0);

    let o = run(&[
        "evaluate",
        "--predictions",
        preds.to_str().unwrap(),
        "--annotations",
        ann.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(e["acc"]["all"].as_f64().unwrap(), all);

    let o = run(&[
        "evaluate",
        "--predictions",
        preds.to_str().unwrap(),
        "--annotations",
        ann.to_str().unwrap(),
        "--format",
        "table",
    ]);
    assert!(o.status.success());
    let header: Vec<String> = stdout(&o).lines().next().unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(header, ["Appearance", "Camera", "Motion", "All"]);
}

#[test]
fn audit_jsonl_goes_to_stdout_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("videos");
    write_fixture_root(&root);
    let o = run(&[
        "audit",
        "--input",
        root.to_str().unwrap(),
        "--sampling",
        "random",
        "--seed",
        "3",
        "--scratch",
        tmp.path().join("scratch").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["video_id"], "clip_a");
    assert_eq!(lines[0]["verdicts"]["flicker"], "no");
    assert_eq!(lines[0]["indices"].as_array().unwrap().len(), 10);
}

#[test]
fn audit_empty_root_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["audit", "--input", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no videos found"));
}

#[test]
fn audit_corrupt_video_is_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("videos");
    write_fixture_root(&root);
    let bad = root.join("clip_z");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("frame_00000.png"), b"not a png").unwrap();
    let report = tmp.path().join("report.json");
    let o = run(&[
        "audit",
        "--input",
        root.to_str().unwrap(),
        "--scratch",
        tmp.path().join("scratch").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["errors"], 1);
    assert_eq!(v["videos"].as_array().unwrap().len(), 4);
}

#[test]
fn qa_gen_emits_one_question_per_category() {
    let o = run(&["qa-gen", "--video-id", "v1", "--video-id", "v2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0]["video_id"], "v1");
    assert_eq!(lines[0]["category_id"], "texture_corruption");
    assert_eq!(lines[0]["question"], "Does this video exhibit texture corruption?");
}

#[test]
fn bad_flag_is_config_error() {
    let o = run(&["sample", "--input", "x", "--k", "zero"]);
    assert_eq!(o.status.code(), Some(3));
}
