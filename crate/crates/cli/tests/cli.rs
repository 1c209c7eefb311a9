use std::path::Path;
use std::process::{Command, Output};

fn xmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmtl"))
        .args(args)
        .env_remove("XMTL_JOBS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small dataset. Images stay 100x100 so the image tap has enough steps for
/// the embedding bins.
fn gen_small(dir: &Path, seed: &str, image_noise: &str) -> Output {
    xmtl(&[
        "gen",
        "--classes",
        "3",
        "--timesteps",
        "200",
        "--per-class",
        "8",
        "--val-per-class",
        "2",
        "--image-size",
        "100",
        "--signal-noise",
        "0.3",
        "--image-noise",
        image_noise,
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn help_on_every_subcommand() {
    for sub in [
        vec!["--help"],
        vec!["gen", "--help"],
        vec!["train", "--help"],
        vec!["sweep", "--help"],
        vec!["report", "--help"],
        vec!["checkpoint", "--help"],
        vec!["checkpoint", "inspect", "--help"],
        vec!["checkpoint", "verify", "--help"],
        vec!["checkpoint", "eval", "--help"],
    ] {
        let out = xmtl(&sub);
        assert_eq!(out.status.code(), Some(0), "{sub:?}");
        assert!(stdout(&out).contains("Usage"), "{sub:?}");
    }
}

#[test]
fn gen_writes_all_pairs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = xmtl(&[
        "gen",
        "--classes",
        "10",
        "--timesteps",
        "1000",
        "--per-class",
        "120",
        "--signal-noise",
        "0.3",
        "--image-noise",
        "0.0",
        "--seed",
        "7",
        "--out",
        tmp.path().join("d0").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("wrote 1200 pairs"));
    let count = |split: &str| {
        std::fs::read_dir(tmp.path().join("d0").join(split))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .to_str()
                    .unwrap()
                    .ends_with(".signal.f64")
            })
            .count()
    };
    assert_eq!(count("train") + count("val"), 1200);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(gen_small(&a, "3", "0.5").status.success());
    assert!(gen_small(&b, "3", "0.5").status.success());
    let manifest = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    let sample = |d: &Path| std::fs::read(d.join("train/000004.image.f64")).unwrap();
    assert_eq!(sample(&a), sample(&b));
}

#[test]
fn usage_errors_exit_2() {
    let out = xmtl(&["gen", "--classes", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    let out = xmtl(&["train", "--data", "x", "--dml", "euclid"]);
    assert_eq!(out.status.code(), Some(2));
    let out = xmtl(&["train", "--data", "x", "--mode", "audio"]);
    assert_eq!(out.status.code(), Some(2));
    for kind in ["mse", "cs", "pc", "kl", "kmmd", "bc", "po"] {
        // Accepted at parse time; fails later on the missing dataset.
        let out = xmtl(&["train", "--data", "/nonexistent/xmtl", "--dml", kind]);
        assert_eq!(out.status.code(), Some(3), "{kind}");
    }
}

#[test]
fn report_on_empty_directory_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = xmtl(&["report", "--runs", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let out = xmtl(&["report", "--runs", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(gen_small(&data, "1", "0.0").status.success());
    let run = tmp.path().join("run");
    let out = xmtl(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "combined",
        "--pairing",
        "triplet",
        "--dml",
        "po",
        "--epochs",
        "3",
        "--batch-size",
        "8",
        "--seed",
        "5",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let last = text.lines().last().unwrap();
    let acc: f64 = last
        .strip_prefix("final_val_acc=")
        .expect("machine-readable last line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,split,metric,value\n"));

    let ckpt = run.join("best.ckpt");
    let out = xmtl(&["checkpoint", "verify", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let out = xmtl(&["checkpoint", "inspect", ckpt.to_str().unwrap()]);
    assert!(stdout(&out).contains("config_hash"));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let out = xmtl(&[
        "checkpoint",
        "eval",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    let eval: f64 = stdout(&out)
        .trim()
        .strip_prefix("val_acc=")
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(eval, summary["best_val_acc"].as_f64().unwrap());

    // Same seed, same metrics bytes.
    let run2 = tmp.path().join("run2");
    let out = xmtl(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "combined",
        "--dml",
        "po",
        "--epochs",
        "3",
        "--batch-size",
        "8",
        "--seed",
        "5",
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(run.join("metrics.csv")).unwrap(),
        std::fs::read(run2.join("metrics.csv")).unwrap()
    );

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4] = 9;
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let out = xmtl(&["checkpoint", "verify", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn sweep_and_report_nine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let out = xmtl(&[
        "sweep",
        "--classes",
        "3",
        "--timesteps",
        "200",
        "--per-class",
        "6",
        "--val-per-class",
        "2",
        "--image-size",
        "100",
        "--epochs",
        "2",
        "--batch-size",
        "6",
        "--grid",
        "0,1.95",
        "--repeats",
        "1",
        "--jobs",
        "1",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = xmtl(&["report", "--runs", runs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let table = stdout(&out);
    assert_eq!(
        table
            .lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
            .count(),
        9
    );
    for label in [
        "TS model",
        "Combined (image, L_CS)",
        "Combined (TS, L_kMMD)",
        "Combined (TS, L_PO)",
    ] {
        assert!(table.contains(label), "{label}");
    }
    let curves = std::fs::read_to_string(runs.join("curves.csv")).unwrap();
    let epochs: Vec<&str> = curves
        .lines()
        .filter(|l| l.starts_with("TS model,"))
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(epochs, ["0", "1"]);
}
