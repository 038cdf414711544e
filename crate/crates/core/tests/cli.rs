//! The `highres3d` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_highres3d")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_params_prints_exact_totals() {
    let o = run(&["count-params", "--arch", "default", "--classes", "160"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("parameters: 813872"), "{}", stdout(&o));
    assert!(stdout(&o).contains("approx: 0.81M"));
    let o = run(&["count-params", "--arch", "dropout", "--classes", "160"]);
    assert!(stdout(&o).contains("parameters: 821552"));
}

#[test]
fn rf_histogram_is_csv() {
    let o = run(&["analyze", "rf", "--arch", "default"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("extent,count"));
    let total: u64 = lines.map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 512);
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["count-params", "--arch", "huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "usage");
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let o = run(&["generate", "--out", "/tmp/unused-hr3d", "--classes", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", s(&dir.path().join("missing.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["exit_code"], 2);

    let gen = dir.path().join("data");
    assert!(run(&["generate", "--out", s(&gen), "--size", "16"]).status.success());
    let img = gen.join("test_000_image.vol");
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
    let ckpt = dir.path().join("none.ckpt");
    let o = run(&["predict", "--checkpoint", s(&ckpt), "--in", s(&img), "--out", s(&dir.path().join("o.vol"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("data");
    assert!(run(&["generate", "--out", s(&gen), "--size", "16"]).status.success());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "lr = 1e30\naugment = false\n").unwrap();
    let o = run(&[
        "train", "--data", s(&gen.join("manifest.json")), "--out", s(&dir.path().join("run")), "--config", s(&cfg),
        "--widths", "2,2,2", "--subvolume", "12", "--iters", "20", "--val-every", "20",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_json(&o)["error"]["kind"], "numeric");
}

#[test]
fn generate_train_predict_sample_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("data");
    let manifest = gen.join("manifest.json");
    let o = run(&["generate", "--out", s(&gen), "--size", "16", "--train", "1", "--test", "1"]);
    assert!(o.status.success());
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--data", s(&manifest), "--out", s(&out), "--arch", "dropout", "--loss", "dice", "--seed", "3",
        "--widths", "2,2,2", "--subvolume", "12", "--iters", "4", "--val-every", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // The resolved configuration is echoed and saved.
    let echoed = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(stdout(&o).starts_with(&echoed));
    assert!(echoed.contains("arch = \"dropout\"") && echoed.contains("seed = 3"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,val_mean_dcs,wall_time_s"));
    assert_eq!(metrics.lines().count(), 5);

    let ckpt = out.join("final.ckpt");
    let img = gen.join("test_000_image.vol");
    let labels = dir.path().join("pred.vol");
    let o = run(&["predict", "--checkpoint", s(&ckpt), "--in", s(&img), "--out", s(&labels), "--pad", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = highres3d::io::read_labels(&labels, 3).unwrap();
    assert_eq!(pred.dims(), [16; 3]);

    let unc = dir.path().join("unc.vol");
    let o = run(&[
        "sample", "--checkpoint", s(&ckpt), "--in", s(&img), "--samples", "4", "--seed", "1", "--out-labels",
        s(&labels), "--out-uncertainty", s(&unc),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let u = highres3d::io::read_image(&unc).unwrap();
    assert!(u.data().iter().all(|&v| (0.0..=0.75).contains(&v)));

    let o = run(&["analyze", "border", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--borders", "0,2,4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("border,mean_dcs,std_err,voxels\n0,"));

    let csv_path = dir.path().join("acc.csv");
    let o = run(&[
        "analyze", "curve", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--samples", "1,3", "--out-accuracy",
        s(&csv_path),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("samples,mean_dcs\n1,"));
    let acc = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(acc.lines().next(), Some("threshold,accuracy,retained_fraction"));

    // Re-running from the emitted config reproduces the metrics.
    let again = dir.path().join("again");
    let o = run(&["train", "--data", s(&manifest), "--out", s(&again), "--config", s(&out.join("config.toml"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let strip = |t: &str| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&std::fs::read_to_string(again.join("metrics.csv")).unwrap()), strip(&metrics));
    assert_eq!(std::fs::read(again.join("final.ckpt")).unwrap(), std::fs::read(&ckpt).unwrap());
}
