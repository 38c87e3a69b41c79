use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtrack")).args(args).env("MTRACK_LOG", "error").output().expect("spawn mtrack")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_then_eval_gt_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mtrack(&["synth", "--out", s(&data), "--scenes", "2", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("synth.toml").is_file());
    let seq = data.join("synth-000");
    for f in ["seqinfo.ini", "gt/gt.txt", "det/det.txt"] {
        assert!(seq.join(f).is_file(), "missing {f}");
    }
    let json = dir.path().join("eval.json");
    let o = mtrack(&["eval", "--gt", s(&data), "--hyp", s(&data), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["overall"]["mota"], 1.0);
    assert_eq!(v["overall"]["idf1"], 1.0);
    assert!(!o.stdout.is_empty());
}

#[test]
fn kalman_tracking_writes_results_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mtrack(&["synth", "--out", s(&data), "--scenes", "1"]).status.success());
    let out = dir.path().join("trk");
    let o = mtrack(&["track", "--data", s(&data), "--out", s(&out), "--predictor", "kalman", "--diagnostics"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("synth-000.txt").is_file());
    assert!(out.join("run.toml").is_file());
    let diag = fs::read_to_string(out.join("synth-000.diag.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    assert!(first.is_object());
}

#[test]
fn errors_are_single_categorized_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mtrack(&["synth", "--out", s(&data), "--scenes", "1"]).status.success());

    let o = mtrack(&["track", "--data", s(&data), "--out", s(&dir.path().join("t"))]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");
    assert!(e.starts_with("error kind=config"), "{e}");

    let o = mtrack(&["eval", "--gt", s(&dir.path().join("nope")), "--hyp", s(&data)]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=io"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nsteps = -3\n").unwrap();
    let o = mtrack(&["train", "--data", s(&data), "--out", s(&dir.path().join("r")), "--config", s(&bad)]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=config"), "{}", stderr(&o));

    let gt = data.join("synth-000").join("gt").join("gt.txt");
    fs::write(&gt, "1,1,10,10,5,5,1,-1,-1,-1\nnot,a,row\n").unwrap();
    let o = mtrack(&["eval", "--gt", s(&data), "--hyp", s(&data)]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=parse"), "{}", stderr(&o));
}

#[test]
fn short_training_run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mtrack(&["synth", "--out", s(&data), "--scenes", "1"]).status.success());
    let run = dir.path().join("run");
    let o = mtrack(&[
        "train", "--data", s(&data), "--out", s(&run), "--steps", "6", "--warmup", "2", "--batch-size", "8", "--checkpoint-every", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("checkpoints").join("step_000003.ckpt").is_file());
    assert!(run.join("checkpoints").join("step_000006.ckpt").is_file());
}
