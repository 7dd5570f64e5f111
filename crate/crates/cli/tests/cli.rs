use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use styleae::probes::Probe;

fn styleae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "\
# tiny run
probe_train_samples=300
probe_heldout_samples=100
probe_epochs=1
ae_train_samples=128
epochs=2
ramp_epochs=1
eval_samples=24
max_per_direction=4
";

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&styleae(&["--help"])), 0);
    assert_eq!(code(&styleae(&["frobnicate"])), 1);
    assert_eq!(code(&styleae(&["pipeline"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 3, "epoch": 4}"#).unwrap();
    let out = styleae(&["gen-data", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let clash = dir.path().join("clash.cfg");
    fs::write(&clash, "probe_seed=5\nae_seed=5\n").unwrap();
    let out = styleae(&["gen-data", "--config", p(&clash), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("pairwise distinct"));
}

#[test]
fn probe_below_floor_exits_with_gate_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&styleae(&["gen-data", "--config", p(&cfg), "--out", p(&out)])), 0);
    let res = styleae(&["train-probe", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stderr(&res).contains("below"));
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let run = dir.path().join("run");
    let c = p(&cfg);

    let out = styleae(&["gen-data", "--config", c, "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["probe", "train", "eval"] {
        assert!(run.join(format!("data/{name}.synd")).exists());
    }

    let plugin = run.join("plugin.sae");
    let train = p(&run.join("data/train.synd")).to_owned();
    let out = styleae(&["train-ae", "--config", c, "--data", &train, "--out", p(&plugin), "lambda_max=0.2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(plugin.exists());

    // An untrained but frozen probe keeps this test fast.
    let mut probe = Probe::new(32, 32, 4, 1).unwrap();
    probe.freeze();
    let probe_path = run.join("probe.prb");
    probe
        .to_envelope(serde_json::json!({}))
        .write_to(&probe_path)
        .unwrap();

    let records = styleae::pipeline::load_dataset(&run.join("data/eval.synd")).unwrap().2;
    let w_json = run.join("w.json");
    fs::write(&w_json, serde_json::to_string(&records[0].w).unwrap()).unwrap();
    let edit_json = run.join("edit.json");
    let edit_png = run.join("edit.png");
    let out = styleae(&[
        "edit", "--config", c, "--checkpoint", p(&plugin), "--probe", p(&probe_path), "--attr", "striped",
        "--target", "1", "--conf", "0.6", "--in", p(&w_json), "--out-image", p(&edit_png), "--out-json",
        p(&edit_json), "--out", p(&run.join("unused.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let result: serde_json::Value = serde_json::from_slice(&fs::read(&edit_json).unwrap()).unwrap();
    assert_eq!(result["w_hat"].as_array().unwrap().len(), 64);
    assert!(edit_png.exists());

    let out = styleae(&[
        "edit", "--config", c, "--checkpoint", p(&plugin), "--probe", p(&probe_path), "--attr", "smiling",
        "--target", "1", "--in", p(&w_json), "--out", p(&edit_json),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bright-background"));

    let projection = run.join("projection.json");
    let out = styleae(&[
        "project", "--config", c, "--in", p(&edit_png), "--iters", "20", "--out", p(&projection),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let proj: serde_json::Value = serde_json::from_slice(&fs::read(&projection).unwrap()).unwrap();
    assert_eq!(proj["trace"].as_array().unwrap().len(), 21);

    let eval_dir = run.join("eval");
    let out = styleae(&[
        "eval", "--config", c, "--checkpoint", p(&plugin), "--probe", p(&probe_path), "--data",
        p(&run.join("data/eval.synd")), "--out", p(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 9);
    assert!(eval_dir.join("report.json").exists());

    let gallery = run.join("gallery");
    let out = styleae(&[
        "gallery", "--config", c, "--checkpoint", p(&plugin), "--probe", p(&probe_path), "--data",
        p(&run.join("data/eval.synd")), "--attrs", "striped,elongated", "--samples", "2", "--out", p(&gallery),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let strip = styleae::ImageGrid::load(&gallery.join("strip_001.png")).unwrap();
    assert_eq!(strip.dims(), (1, 32, 96));

    // A plugin trained against another generator is refused.
    let out = styleae(&[
        "eval", "--config", c, "--seed", "9", "--checkpoint", p(&plugin), "--probe", p(&probe_path), "--data",
        p(&run.join("data/eval.synd")), "--out", p(&eval_dir),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn stage_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.synd");
    let out = styleae(&["train-ae", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
