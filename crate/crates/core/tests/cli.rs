use std::path::Path;
use std::process::{Command, Output};

fn cfnet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = cfnet(cwd, args);
    assert!(
        out.status.success(),
        "cfnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn same_file(a: &Path, b: &Path) {
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{a:?} vs {b:?}");
}

#[test]
fn gradcheck_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--trials", "200", "--k", "2..12"]);
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .expect("error line");
    let err: f64 = line.trim().parse().unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn groups_on_identity_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("eye.csv"),
        "# kind=normalized\na,b,c\n1,0,0\n0,1,0\n0,0,1\n",
    )
    .unwrap();
    ok(dir.path(), &["groups", "--confusion", "eye.csv", "--out", "p.txt"]);
    let text = std::fs::read_to_string(dir.path().join("p.txt")).unwrap();
    assert!(text.lines().all(|l| l.starts_with('#')), "{text}");
}

#[test]
fn stages_reproduce_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["ablate", "--output_dir", "a"]);
    let a = d.join("a");
    let cfg = "a/config.txt";

    ok(d, &["train-baseline", "--data", "a/train.cfds", "--out", "ce.ckpt", "--config", cfg]);
    same_file(&d.join("ce.ckpt"), &a.join("model_ce.ckpt"));

    ok(d, &["confusion", "--model", "ce.ckpt", "--data", "a/train.cfds", "--out", "cm.csv"]);
    same_file(&d.join("cm.csv"), &a.join("confusion_train.csv"));

    ok(d, &["groups", "--confusion", "cm.csv", "--out", "p.txt"]);
    same_file(&d.join("p.txt"), &a.join("partition.txt"));

    let common = ["--model", "ce.ckpt", "--data", "a/train.cfds", "--partition", "p.txt", "--config", cfg];
    ok(d, &[&["train-subnets", "--out", "s.ckpt"], &common[..]].concat());
    same_file(&d.join("s.ckpt"), &a.join("model_ce_subnets.ckpt"));

    let newce = ["--loss", "newce", "--confusion", "cm.csv"];
    ok(d, &[&["train-subnets", "--out", "n0.ckpt", "--head0-only"], &newce[..], &common[..]].concat());
    same_file(&d.join("n0.ckpt"), &a.join("model_newce.ckpt"));
    ok(d, &[&["train-subnets", "--out", "n.ckpt"], &newce[..], &common[..]].concat());
    same_file(&d.join("n.ckpt"), &a.join("model_newce_subnets.ckpt"));

    ok(
        d,
        &[
            "evaluate", "--model", "n.ckpt", "--data", "a/val.cfds", "--partition", "p.txt", "--out", "ev",
            "--plot-data", "--config", cfg,
        ],
    );
    same_file(&d.join("ev/report.json"), &a.join("report_newce_subnets.json"));
    same_file(&d.join("ev/confusion.csv"), &a.join("confusion_newce_subnets.csv"));
    same_file(&d.join("ev/iou.txt"), &a.join("iou_newce_subnets.txt"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("exp.cfg"), "lambda = 3\nepochs_phase2 = 2\nsamples_per_class = 40\n").unwrap();
    ok(d, &["ablate", "--config", "exp.cfg", "--lambda", "4", "--output_dir", "o"]);
    let written = std::fs::read_to_string(d.join("o/config.txt")).unwrap();
    assert!(written.contains("lambda = 4\n"));
    assert!(written.contains("epochs_phase2 = 2\n"));
    assert!(written.contains("samples_per_class = 40\n"));
}

#[test]
fn generate_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &["generate", "--out", "d.cfds", "--class_count", "3", "--samples_per_class", "10", "--confusable_pairs", "none"],
    );
    assert!(stdout.starts_with("30 samples, 3 classes"), "{stdout}");
    let data = confusion_subnets::data::load_dataset(&dir.path().join("d.cfds")).unwrap();
    assert_eq!(data.class_counts(), vec![10, 10, 10]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| cfnet(d, args).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["ablate", "--no-such-flag", "1"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["groups", "--confusion", "missing.csv", "--out", "p.txt"]), 1);
    assert_eq!(code(&["ablate", "--lambda", "-1"]), 1);
    assert_eq!(code(&["gradcheck", "--k", "1..3"]), 1);

    std::fs::write(d.join("junk.ckpt"), "not a model\n").unwrap();
    std::fs::write(d.join("junk.cfds"), "not a dataset\n").unwrap();
    assert_eq!(
        code(&["confusion", "--model", "junk.ckpt", "--data", "junk.cfds", "--out", "c.csv"]),
        2
    );
}
