//! End-to-end runs of the `hperl` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 12] = [
    "--preset", "desk-fusion", "--channels", "4", "--rpn-hidden", "8", "--fc-hidden", "8", "--top-n", "8", "--batch-size",
    "2",
];

fn hperl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hperl"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn hperl")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = hperl(out, args);
    assert!(
        o.status.success(),
        "hperl {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn generate(dir: &Path, scenes: usize) -> String {
    ok(dir, &["--seed", "3", "generate", "--scenes", &scenes.to_string()]);
    dir.to_str().unwrap().to_string()
}

fn metric(csv: &str, name: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .and_then(|rest| rest.split(',').next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no {name} in {csv}"))
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hperl(tmp.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("generate"));
}

#[test]
fn config_errors_and_runtime_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(hperl(&out, &["generate", "--no-such-key", "1"]).status.code(), Some(2));
    assert_eq!(hperl(&out, &["generate", "--scenes", "many"]).status.code(), Some(2));
    assert_eq!(hperl(&out, &["train", "--epochs", "1"]).status.code(), Some(2));
    assert_eq!(hperl(&out, &["bogus"]).status.code(), Some(2));
    let missing = tmp.path().join("missing");
    let o = hperl(&out, &["train", "--dataset", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let o = Command::new(env!("CARGO_BIN_EXE_hperl"))
        .env("HPERL_THREADS", "zero")
        .args(["--out", out.to_str().unwrap(), "generate", "--scenes", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_dataset_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let stdout = ok(&data, &["generate", "--scenes", "0"]);
    assert!(stdout.starts_with("scenes=0 pedestrians=0"), "{stdout}");
    let d = data.to_str().unwrap();
    let eval = tmp.path().join("eval");
    let table = ok(&eval, &["eval", "--dataset", d, "--predictions", "gt"]);
    assert!(table.starts_with("model,mpjpe_2d_px,pckh,cde_m,xye_m"));
    assert!(eval.join("metrics.csv").exists());
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate(&tmp.path().join("data"), 6);
    let eval = tmp.path().join("eval");
    ok(&eval, &["eval", "--dataset", &d, "--predictions", "gt", "--split", "all"]);
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(metric(&csv, "mpjpe_2d"), 0.0);
    assert_eq!(metric(&csv, "pckh"), 1.0);
    assert_eq!(metric(&csv, "cde"), 0.0);
    assert_eq!(metric(&csv, "xye"), 0.0);
    assert_eq!(metric(&csv, "recall"), 1.0);

    // the written predictions evaluate to the same report
    let again = tmp.path().join("again");
    let preds = eval.join("predictions.csv");
    ok(&again, &["eval", "--dataset", &d, "--predictions", preds.to_str().unwrap(), "--split", "all"]);
    assert_eq!(fs::read_to_string(again.join("metrics.csv")).unwrap(), csv);
}

#[test]
fn zero_epochs_writes_untrained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate(&tmp.path().join("data"), 4);
    let model = tmp.path().join("model");
    let mut args = vec!["train", "--dataset", &d, "--epochs", "0"];
    args.extend(TINY);
    ok(&model, &args);
    let log = fs::read_to_string(model.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only: {log}");
    for f in ["final.ckpt", "last.ckpt", "best.ckpt", "run_config.txt"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(model.join("run_config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "epochs=0"), "{cfg}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate(&tmp.path().join("data"), 6);
    let full = tmp.path().join("full");
    let mut args = vec!["train", "--dataset", &d, "--epochs", "2"];
    args.extend(TINY);
    ok(&full, &args);

    let part = tmp.path().join("part");
    let mut args = vec!["train", "--dataset", &d, "--epochs", "1"];
    args.extend(TINY);
    ok(&part, &args);
    let last = part.join("last.ckpt");
    let last = last.to_str().unwrap();
    ok(&part, &["train", "--dataset", &d, "--resume", last, "--epochs", "2"]);

    for f in ["loss_log.csv", "final.ckpt", "last.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }

    // an override that changes the architecture is refused
    let o = hperl(&part, &["train", "--dataset", &d, "--resume", last, "--channels", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_and_eval_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate(&tmp.path().join("data"), 6);
    let model = tmp.path().join("model");
    let mut args = vec!["train", "--dataset", &d, "--epochs", "1"];
    args.extend(TINY);
    let stdout = ok(&model, &args);
    assert!(stdout.contains("epoch=0"), "{stdout}");
    let eval = tmp.path().join("eval");
    let ckpt = model.join("final.ckpt");
    let table = ok(&eval, &["eval", "--dataset", &d, "--checkpoint", ckpt.to_str().unwrap()]);
    let row = table.lines().nth(1).unwrap();
    assert!(row.starts_with("fusion-concat-align,"), "{row}");
    assert_eq!(row.split(',').count(), 5);

    // a corrupted checkpoint is a runtime error
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let o = hperl(&eval, &["eval", "--dataset", &d, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablation_single_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate(&tmp.path().join("data"), 5);
    let out = tmp.path().join("abl");
    let mut args = vec![
        "ablate", "--dataset", &d, "--epochs", "1", "--grid.modes", "rgb", "--grid.fusions", "concat", "--grid.roi_ops",
        "pool", "--grid.flips", "off",
    ];
    args.extend(TINY);
    ok(&out, &args);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "{table}");
    assert!(lines[1].starts_with("rgb-concat-pool-noflip,rgb,concat,pool,false,"), "{}", lines[1]);
    assert!(lines[1].ends_with(",ok"), "{}", lines[1]);
    assert!(out.join("rgb-concat-pool-noflip/eval/metrics.csv").exists());
}

#[test]
fn config_file_and_flags_merge() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.txt");
    fs::write(&cfg, "scenes=3\nseed=9\n").unwrap();
    let out = tmp.path().join("data");
    let o = Command::new(env!("CARGO_BIN_EXE_hperl"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["generate", "--scenes", "2"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let resolved = fs::read_to_string(out.join("run_config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "scenes=2"), "{resolved}");
    assert!(resolved.lines().any(|l| l == "seed=9"), "{resolved}");

    // the global --seed flag also wins over the file
    let o = Command::new(env!("CARGO_BIN_EXE_hperl"))
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "4", "--out", out.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let resolved = fs::read_to_string(out.join("run_config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed=4"), "{resolved}");
}
