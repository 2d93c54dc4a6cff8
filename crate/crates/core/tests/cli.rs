use std::fs;
use std::path::Path;
use std::process::Command;

use wami_core::postprocess::{write_detections_csv, Detection};
use wami_core::synthdata::read_annotations_csv;

fn wami(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wami")).args(args).current_dir(cwd).output().expect("run wami")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = wami(args, cwd);
    assert!(out.status.success(), "wami {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        ok(&["synth", "--seed", "7", "--size", "192", "--vehicles", "6", "--out", d], tmp.path());
    }
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    ok(&["synth", "--seed", "8", "--size", "192", "--vehicles", "6", "--out", "c"], tmp.path());
    assert_ne!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("c")));
}

#[test]
fn eval_of_perfect_detections_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--seed", "3", "--size", "192", "--vehicles", "6", "--out", "s"], tmp.path());
    let ann = read_annotations_csv(tmp.path().join("s/annotations.csv"), 0, 0).unwrap();
    let rows: Vec<(usize, Detection)> = ann
        .items
        .iter()
        .filter(|a| a.is_moving)
        .map(|a| (a.frame_id, Detection { x: a.x, y: a.y, score: 1.0 }))
        .collect();
    assert!(!rows.is_empty());
    write_detections_csv(&rows, tmp.path().join("d.csv")).unwrap();
    ok(&["eval", "--detections", "d.csv", "--annotations", "s/annotations.csv", "--out", "r.json"], tmp.path());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["f1"], 1.0);
    assert_eq!(report["mean_tp_dist_px"], 0.0);
}

#[test]
fn train_infer_sweep_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(&["synth", "--seed", "5", "--size", "256", "--vehicles", "8", "--out", "s"], p);
    fs::write(p.join("t.cfg"), "width = 4\nbatch_size = 2\n# tiny nets\n").unwrap();
    ok(&["train-clusternet", "--data", "s", "--out", "c.ckpt", "--steps", "2", "--config", "t.cfg"], p);
    ok(&["train-foveanet", "--data", "s", "--out", "f.ckpt", "--steps", "2", "--config", "t.cfg"], p);
    assert!(p.join("f.log.csv").exists());

    for out in ["r1", "r2"] {
        ok(&["infer", "--frames-dir", "s", "--clusternet", "c.ckpt", "--foveanet", "f.ckpt", "--out-dir", out], p);
    }
    assert_eq!(dir_bytes(&p.join("r1")), dir_bytes(&p.join("r2")));
    assert!(p.join("r1/heatmap_00002.png").exists());

    ok(&["sweep", "--frames-dir", "s", "--clusternet", "c.ckpt", "--foveanet", "f.ckpt", "--out", "pr.csv"], p);
    let text = fs::read_to_string(p.join("pr.csv")).unwrap();
    let recall: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(recall.len(), 9);
    assert!(recall.windows(2).all(|w| w[1] <= w[0]));
    assert!(p.join("pr_roc.csv").exists());
}

#[test]
fn bad_input_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(wami(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(wami(&["infer", "--frames-dir", "missing", "--out-dir", "o"], tmp.path()).status.code(), Some(1));
    assert_eq!(wami(&["synth", "--out", "x", "--tau-gate", "abc"], tmp.path()).status.code(), Some(1));
    fs::write(tmp.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    ok(&["synth", "--seed", "1", "--size", "128", "--vehicles", "2", "--out", "s"], tmp.path());
    let out = wami(&["infer", "--frames-dir", "s", "--clusternet", "bad.ckpt", "--foveanet", "bad.ckpt", "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}
