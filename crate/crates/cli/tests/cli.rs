use std::path::Path;
use std::process::{Command, Output};

fn simbase(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simbase"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--set",
    "model.d_in_video=8",
    "--set",
    "model.d_in_text=8",
    "--set",
    "model.d_hidden=8",
    "--set",
    "model.l1=16",
    "--set",
    "synth.n_train=24",
    "--set",
    "synth.n_val=8",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=8",
];

fn with<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn synth_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = simbase(dir, &with("synth", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["splits"]["train"], 24);
    // Both splits share `features/`; neither may clobber the other.
    for (split, n, seed) in [("train", 24, 0), ("val", 8, 1)] {
        let spec = simbase::data::SynthSpec {
            n_samples: n,
            n_snippets: 16,
            d_video: 8,
            d_text: 8,
            snr: 5.0,
            seed,
        };
        let expected = simbase::data::generate_synthetic(&spec).unwrap();
        let loaded = simbase::data::load_split(&dir.join("data/synthetic"), split, 16).unwrap();
        for (a, b) in loaded.iter().zip(&expected) {
            assert_eq!(a.video.data(), b.video.data(), "{split} {}", a.id);
        }
    }

    let out = simbase(dir, &with("train", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/default/checkpoint/manifest.json").exists());
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("runs/default/history.json")).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);

    let out = simbase(dir, &with("eval", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("R@0.5"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("runs/default/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_queries"], 8);

    // Retraining from the same config reproduces the metrics exactly.
    let out = simbase(dir, &with("train", &["--set", "output.checkpoint=again"]));
    assert!(out.status.success());
    let out = simbase(dir, &with("eval", &["--checkpoint", "again", "--set", "output.metrics=again.json"]));
    assert!(out.status.success());
    assert_eq!(std::fs::read(dir.join("again.json")).unwrap(), std::fs::read(dir.join("runs/default/metrics.json")).unwrap());

    let out = simbase(dir, &with("eval", &["--set", "model.d_hidden=16"]));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[8, 8, 8,") && err.contains("[8, 8, 16,"), "{err}");

    for path in ["runs/default/checkpoint", "data/synthetic/train.json", "data/synthetic/features/syn0_00000.tvgf"] {
        let out = simbase(dir, &["inspect", path]);
        assert!(out.status.success(), "{path}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(json(&out)["kind"].is_string());
    }
}

#[test]
fn config_errors_exit_before_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = simbase(tmp.path(), &with("synth", &["--set", "synth.n_train=0"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("data").exists());
    let out = simbase(tmp.path(), &with("train", &["--set", "train.no_such_key=1"]));
    assert_eq!(out.status.code(), Some(1));
    let out = simbase(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(simbase(tmp.path(), &["--help"]).status.success());
}

#[test]
fn corrupt_inputs_exit_with_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tvgf");
    std::fs::write(&bad, b"TVGF\x01\x00\x01\x01garbage").unwrap();
    let out = simbase(tmp.path(), &["inspect", "bad.tvgf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(std::fs::read(&bad).unwrap(), b"TVGF\x01\x00\x01\x01garbage");
}

#[test]
fn gradcheck_reports_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = simbase(tmp.path(), &["gradcheck", "--set", "gradcheck.seeds=1", "--corrupt", "exp"]);
    assert_eq!(out.status.code(), Some(2));
    let report = json(&out);
    let failing: Vec<_> = report["results"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["passed"] == false)
        .map(|r| r["op"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(failing, vec!["exp"]);

    let out = simbase(tmp.path(), &["gradcheck", "--set", "gradcheck.seeds=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
