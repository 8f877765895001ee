use std::path::Path;
use std::process::{Command, Output};

fn shine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shine"))
        .args(args)
        .output()
        .expect("spawn shine")
}

fn ok(args: &[&str]) -> String {
    let out = shine(args);
    assert!(
        out.status.success(),
        "shine {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "model": {"in_channels": 4, "proj_hidden": 6, "d_init": 4, "n_blocks": 2,
            "block_width": 4, "context_kernel": 5, "lstm_hidden": 3},
  "train": {"batch_size": 2, "max_epochs": 5}
}"#;

fn synth_small(dir: &Path, n: &str) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--sessions",
        n,
        "--duration",
        "60",
        "--channels",
        "4",
        "--rate",
        "10",
        "--seed",
        "3",
    ]);
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    synth_small(&data, "4");
    assert!(data.join("synth-0003").join("meta.json").is_file());
    assert!(data.join("run_manifest.json").is_file());

    let split = root.join("split.json");
    let out = ok(&[
        "split",
        "--data",
        p(&data),
        "--n-val",
        "1",
        "--seed",
        "2",
        "--out",
        p(&split),
    ]);
    assert!(out.contains("\"command\":\"split\""));

    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = root.join("run");
    let out = ok(&[
        "train",
        "--data",
        p(&data),
        "--split",
        p(&split),
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--max-epochs",
        "2",
    ]);
    // The flag overrides the file's five epochs.
    assert_eq!(out.lines().filter(|l| l.contains("\"epoch\"")).count(), 2);
    for f in [
        "best.ckpt",
        "last.ckpt",
        "metrics.csv",
        "config.json",
        "run_manifest.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let resolved = std::fs::read_to_string(run.join("config.json")).unwrap();
    assert!(resolved.contains("\"max_epochs\": 2") && resolved.contains("\"batch_size\": 2"));

    let traces = root.join("traces");
    ok(&[
        "predict",
        "--ckpt",
        p(&run.join("best.ckpt")),
        "--data",
        p(&data),
        "--out",
        p(&traces),
    ]);
    let csv = root.join("metrics.csv");
    let out = ok(&[
        "eval",
        "--traces",
        p(&traces),
        "--data",
        p(&data),
        "--calibrate-on",
        p(&split),
        "--out",
        p(&csv),
    ]);
    assert!(out.contains("f1_macro"));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("model_id,session_id,threshold,f1_macro,f1_speech,f1_silence"));
    assert_eq!(table.lines().count(), 1 + 3 + 1);

    let trace_files: Vec<String> = std::fs::read_dir(&traces)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "f32"))
        .map(|p| format!("\"{}\"", p.display()))
        .collect();
    let spec = root.join("ens.json");
    std::fs::write(
        &spec,
        format!("{{\"trace_paths\": [{}]}}", trace_files.join(",")),
    )
    .unwrap();
    let ens = root.join("ens");
    ok(&[
        "ensemble",
        "--manifest",
        p(&spec),
        "--out",
        p(&ens),
        "--data",
        p(&data),
        "--calibrate-on",
        p(&split),
    ]);
    assert!(ens.join("manifest.json").is_file() && ens.join("metrics.csv").is_file());
}

#[test]
fn synth_is_reproducible_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_small(&a, "2");
    synth_small(&b, "2");
    for f in ["meg.f32", "labels.u8", "meta.json", "mel.f32"] {
        assert_eq!(
            std::fs::read(a.join("synth-0004").join(f)).unwrap(),
            std::fs::read(b.join("synth-0004").join(f)).unwrap()
        );
    }
    let out = shine(&[
        "synth",
        "--out",
        p(&tmp.path().join("c")),
        "--duration",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("InvalidConfig"));
}

#[test]
fn eval_on_empty_traces_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "2");
    let split = tmp.path().join("split.json");
    ok(&[
        "split",
        "--data",
        p(&data),
        "--n-val",
        "1",
        "--out",
        p(&split),
    ]);
    let empty = tmp.path().join("traces");
    std::fs::create_dir(&empty).unwrap();
    let out = shine(&[
        "eval",
        "--traces",
        p(&empty),
        "--data",
        p(&data),
        "--calibrate-on",
        p(&split),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("EmptyEnsemble"));
}

#[test]
fn too_few_sessions_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "2");
    let out = shine(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("run")),
        "--n-val",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TooFewSessions"));
    let out = shine(&["split", "--data", p(&data), "--n-val", "5"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("TooFewSessions"));
}

#[test]
fn bad_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "3");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = shine(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("run")),
        "--n-val",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ConfigParse"));
}

#[test]
fn help_lists_defaults() {
    let train = ok(&["train", "--help"]);
    for d in [
        "[default: 0.001]",
        "[default: 0.01]",
        "[default: 20]",
        "[default: 30]",
        "[default: 8]",
        "[default: 4]",
    ] {
        assert!(train.contains(d), "train --help lacks {d}:\n{train}");
    }
    let predict = ok(&["predict", "--help"]);
    for d in ["[default: 30]", "[default: 20]", "[default: 5]"] {
        assert!(predict.contains(d), "predict --help lacks {d}");
    }
}
