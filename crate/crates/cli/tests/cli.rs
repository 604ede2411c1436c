use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qalam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qalam"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qalam(args);
    assert!(
        out.status.success(),
        "qalam {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = qalam(args);
    assert!(!out.status.success(), "qalam {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus, split and one tiny trained checkpoint.
fn pipeline(dir: &Path) {
    let corpus = dir.join("corpus");
    ok(&[
        "prepare",
        "--root",
        s(&corpus),
        "--synthetic",
        "--samples-per-pair",
        "5",
        "--letters",
        "Alef,Baa",
        "--seed",
        "1",
    ]);
    ok(&[
        "split",
        "--manifest",
        s(&corpus.join("manifest.csv")),
        "--out",
        s(dir),
        "--seed",
        "2",
    ]);
    fs::write(
        dir.join("tiny.json"),
        r#"{ "family": "custom_cnn", "conv_channels": [4, 8], "head_width": 16 }"#,
    )
    .unwrap();
    fs::write(
        dir.join("train.cfg"),
        "max_epochs = 2\naugmentation = off\nbatch_size = 8\n",
    )
    .unwrap();
    ok(&[
        "train",
        "--spec",
        s(&dir.join("tiny.json")),
        "--splits",
        s(&dir.join("splits.json")),
        "--manifest",
        s(&corpus),
        "--out",
        s(&dir.join("run")),
        "--seed",
        "3",
        "--config",
        s(&dir.join("train.cfg")),
    ]);
}

#[test]
fn end_to_end_commands_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    assert!(d.join("corpus/manifest.csv").is_file());
    assert!(d.join("corpus/prepare.config").is_file());
    assert!(d.join("split.config").is_file());
    let run = d.join("run");
    assert!(run.join("history.csv").is_file());
    let resolved = fs::read_to_string(run.join("train.config")).unwrap();
    assert!(resolved.contains("max_epochs = 2"), "{resolved}");
    assert!(resolved.contains("seed = 3"), "{resolved}");
    let best = run.join("checkpoints/run/best");
    assert!(best.join("model.safetensors").is_file());

    let eval = d.join("eval");
    let (corpus, splits) = (d.join("corpus"), d.join("splits.json"));
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&best),
        "--out",
        s(&eval),
        "--manifest",
        s(&corpus),
        "--splits",
        s(&splits),
    ]);
    for f in [
        "predictions.csv",
        "report.json",
        "report.csv",
        "per_letter.csv",
        "per_pair.csv",
        "evaluate.config",
    ] {
        assert!(eval.join(f).is_file(), "missing {f}");
    }

    let fused = d.join("fused/out.csv");
    ok(&[
        "fuse",
        "--preds-a",
        s(&eval.join("predictions.csv")),
        "--preds-b",
        s(&eval.join("predictions.csv")),
        "--out",
        s(&fused),
    ]);
    // Fusing a dump with itself reproduces it.
    let a = fs::read_to_string(eval.join("predictions.csv")).unwrap();
    let b = fs::read_to_string(&fused).unwrap();
    assert_eq!(a.lines().count(), b.lines().count());
    assert!(d.join("fused/fusion_details.csv").is_file());

    let json = |p: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap() };
    let single = json(&eval.join("report.json"));
    for key in ["overall", "per_letter", "per_pair"] {
        assert!(single.get(key).is_some(), "report.json lacks {key}");
    }
    let scored = d.join("scored");
    ok(&[
        "report",
        "--predictions",
        s(&fused),
        "--manifest",
        s(&corpus),
        "--out",
        s(&scored),
    ]);
    let ensemble = json(&scored.join("report.json"));
    for task in ["letter", "position"] {
        for m in ["accuracy", "precision", "recall", "f1"] {
            assert_eq!(ensemble["overall"][task][m], single["overall"][task][m], "{task} {m}");
        }
    }
    assert_eq!(ensemble["per_pair"], single["per_pair"]);

    let rep = d.join("rep");
    ok(&[
        "report",
        "--report",
        s(&eval.join("report.json")),
        "--format",
        "csv",
        "--out",
        s(&rep),
        "--percent",
    ]);
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains('%'), "{csv}");
}

#[test]
fn augment_is_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&[
        "prepare",
        "--root",
        s(&corpus),
        "--synthetic",
        "--samples-per-pair",
        "1",
        "--letters",
        "Alef",
        "--seed",
        "4",
    ]);
    let (x, y) = (tmp.path().join("x"), tmp.path().join("y"));
    for out in [&x, &y] {
        ok(&[
            "augment",
            "--in",
            s(&corpus),
            "--out",
            s(out),
            "--seed",
            "9",
            "--copies",
            "2",
        ]);
    }
    let log_x = fs::read_to_string(x.join("augment_log.json")).unwrap();
    assert_eq!(log_x, fs::read_to_string(y.join("augment_log.json")).unwrap());
    let entries: serde_json::Value = serde_json::from_str(&log_x).unwrap();
    let entries = entries.as_array().unwrap();
    // Alef has two positional forms, one sample each, two copies apiece.
    assert_eq!(entries.len(), 4);
    let img = entries[3]["file"].as_str().unwrap();
    assert_eq!(fs::read(x.join(img)).unwrap(), fs::read(y.join(img)).unwrap());
}

#[test]
fn errors_name_the_missing_path_or_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let err = fail(&[
        "split",
        "--manifest",
        s(&missing),
        "--out",
        s(tmp.path()),
        "--seed",
        "1",
    ]);
    assert!(err.contains(s(&missing)), "{err}");
    let err = fail(&["split", "--manifest", s(&missing), "--out", s(tmp.path())]);
    assert!(err.contains("seed"), "{err}");
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "mystery = 1\n").unwrap();
    let err = fail(&[
        "augment",
        "--in",
        s(&missing),
        "--out",
        s(tmp.path()),
        "--seed",
        "1",
        "--config",
        s(&cfg),
    ]);
    assert!(err.contains("mystery"), "{err}");
}
