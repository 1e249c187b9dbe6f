mod common;

use std::path::Path;
use std::process::{Command, Output};

fn pwself(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwself")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn match_prints_pairs_then_mp() {
    let out = stdout(&pwself(&[
        "match",
        "--a",
        "100,100,380,380,224,0",
        "--b",
        "40,20,220,180,96,0",
        "--patch",
        "16",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 14);
    assert_eq!(lines[0], "0 0");
    assert_eq!(lines[1], "1 21");
    assert_eq!(lines[12], "48 36");
    assert_eq!(lines[13], "MP=13");
}

#[test]
fn match_rejects_malformed_crop() {
    let out = pwself(&["match", "--a", "1,2,3", "--b", "0,0,4,4,8,0", "--patch", "4"]);
    assert!(!out.status.success());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    common::write_cifar_fixture(&data, 32, 20, 3);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, common::TINY_CONFIG).unwrap();
    let out = dir.path().join("run");
    let p = |x: &Path| x.to_str().unwrap().to_owned();

    let text = stdout(&pwself(&[
        "train",
        "--config",
        &p(&cfg),
        "--data",
        &p(&data),
        "--out",
        &p(&out),
    ]));
    assert!(text.starts_with("metrics="), "{text}");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,epoch,loss,lr,wd,tau_t,ema_lambda"
    );
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);

    let ckpt = out.join("checkpoint.manifest");
    let text = stdout(&pwself(&[
        "eval",
        "--checkpoint",
        &p(&ckpt),
        "--data",
        &p(&data),
        "--knn",
        "1,5",
        "--linear-epochs",
        "5",
    ]));
    let parts: Vec<&str> = text.trim().split(", ").collect();
    assert_eq!(parts.len(), 3, "{text}");
    for (part, key) in parts.iter().zip(["knn@1", "knn@5", "linear"]) {
        let (k, v) = part.split_once('=').unwrap();
        assert_eq!(k, key);
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 1\nno.such.key = 3\n").unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    let out = pwself(&[
        "train",
        "--config",
        &p(&cfg),
        "--data",
        &p(dir.path()),
        "--out",
        &p(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no.such.key"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["desk.cfg", "smoke.cfg"] {
        pwself::trainer::TrainConfig::from_file(&dir.join(name)).unwrap();
    }
    let desk = pwself::trainer::TrainConfig::from_file(&dir.join("desk.cfg")).unwrap();
    assert_eq!(desk.train_limit, Some(5000));
    assert_eq!(desk.test_limit, Some(1000));
    assert_eq!(desk.epochs, 20);
}

#[test]
fn resume_checks_config_and_keeps_finished_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    common::write_cifar_fixture(&data, 32, 20, 4);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, common::TINY_CONFIG).unwrap();
    let out = dir.path().join("run");
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    let args = ["train", "--config", &p(&cfg), "--data", &p(&data), "--out", &p(&out)];

    stdout(&pwself(&args));
    let before = std::fs::read(out.join("metrics.csv")).unwrap();
    stdout(&pwself(&[&args[..], &["--resume"]].concat()));
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), before);

    let other = dir.path().join("other.cfg");
    std::fs::write(&other, format!("{}seed = 9\n", common::TINY_CONFIG)).unwrap();
    let args = [
        "train",
        "--config",
        &p(&other),
        "--data",
        &p(&data),
        "--out",
        &p(&out),
        "--resume",
    ];
    let res = pwself(&args);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("different config"));
}
