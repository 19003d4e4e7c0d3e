use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn maf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) {
    let o = maf(&["gen-data", "--out", p(dir), "--n-source", "6", "--n-target", "6", "--n-val", "4", "--seed", "2"]);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(maf(&["--help"]).status.code(), Some(0));
    assert_eq!(maf(&["--version"]).status.code(), Some(0));
    assert_eq!(maf(&[]).status.code(), Some(1));
    assert_eq!(maf(&["fly"]).status.code(), Some(1));
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path());
    gen(b.path());
    for f in ["manifest.json", "annotations.jsonl", "val/annotations.jsonl", "source_00003.ppm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert!(a.path().join("run.json").exists());

    let c = tempfile::tempdir().unwrap();
    let o = maf(&["gen-data", "--out", p(c.path()), "--n-source", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("n_source"), "{}", text(&o));
}

#[test]
fn bad_configs_are_named() {
    let data = tempfile::tempdir().unwrap();
    gen(data.path());
    let out = tempfile::tempdir().unwrap();
    let o = maf(&["train", "--data", p(data.path()), "--out", p(out.path()), "--variant", "fancy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("fancy"), "{}", text(&o));

    let o = maf(&["train", "--data", p(data.path()), "--out", p(out.path()), "--set", "alpah=0.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("alpah"), "{}", text(&o));

    let o = maf(&["train", "--data", p(data.path()), "--out", p(out.path()), "--set", "align.lambda=-1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = maf(&["eval", "--data", p(data.path()), "--run", p(&out.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("missing"), "{}", text(&o));
}

#[test]
fn train_eval_sweep_and_replay() {
    let data = tempfile::tempdir().unwrap();
    gen(data.path());
    let work = tempfile::tempdir().unwrap();
    let run = work.path().join("run");
    let d = p(data.path());
    let o = maf(&[
        "train", "--data", d, "--out", p(&run), "--variant", "full", "--set", "phase1_iters=6", "--set",
        "phase2_iters=2",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["run.json", "model.ckpt", "state.ckpt", "losses.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 9);

    let o = maf(&["eval", "--data", d, "--run", p(&run)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("mAP@0.5"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval/eval.json")).unwrap()).unwrap();
    assert!(eval["map"].as_f64().unwrap() >= 0.0);
    assert!(run.join("eval/run.json").exists());

    let o = maf(&["sweep-iou", "--data", d, "--run", p(&run)]);
    assert!(o.status.success(), "{}", text(&o));
    let sweep = fs::read_to_string(run.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 11);

    // the recorded config reproduces the run
    let again = work.path().join("again");
    let o = maf(&["train", "--data", d, "--out", p(&again), "--config", p(&run.join("run.json"))]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    let hash = |dir: &Path| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&run), hash(&again));

    let svg = work.path().join("losses.svg");
    let o = maf(&["plot", p(&run.join("losses.csv")), "--out", p(&svg), "--columns", "l_det,l_t"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 2);
}

#[test]
fn plot_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    fs::write(&csv, "threshold,map\n0.5,0.4\n0.55,0.3\n").unwrap();
    let svg = dir.path().join("s.svg");
    let o = maf(&["plot", p(&csv), "--out", p(&svg)]);
    assert!(o.status.success(), "{}", text(&o));
    let s = fs::read_to_string(&svg).unwrap();
    assert!(s.starts_with("<svg"));
    assert_eq!(s.matches("<circle").count(), 2);

    fs::write(&csv, "threshold,map\n0.5,abc\n").unwrap();
    let o = maf(&["plot", p(&csv), "--out", p(&svg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("s.csv"));
}

#[test]
fn gradcheck_reports_each_operator() {
    let dir = tempfile::tempdir().unwrap();
    let o = maf(&["gradcheck", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), out.lines().count());
}
