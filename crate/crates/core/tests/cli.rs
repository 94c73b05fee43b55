use std::path::Path;
use std::process::{Command, Output};

use patchreg::cli::{RunManifest, EXIT_DATA, EXIT_OK, EXIT_USAGE, MANIFEST_NAME};

fn patchreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchreg"))
        .args(args)
        .env_remove("PATCHREG_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, dims: &str, seed: &str) {
    assert_ok(&patchreg(&[
        "--deterministic",
        "synth",
        "--dims",
        dims,
        "--blob-count",
        "1500",
        "--seed",
        seed,
        "--out",
        p(dir),
    ]));
}

#[test]
fn synth_writes_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("pair");
    synth(&dir, "24", "1");
    for f in ["source.ivl", "target.ivl", "truth.ivf", "landmarks.csv", MANIFEST_NAME] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(manifest.subcommand, "synth");
    assert_eq!(manifest.seed, Some(1));
    assert!(manifest.deterministic);
    assert_eq!(manifest.threads, 1);
    assert!(manifest.outputs.contains_key("truth"));
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "20", "4");
    synth(&b, "20", "4");
    for f in ["source.ivl", "target.ivl", "truth.ivf", "landmarks.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = patchreg(&["synth", "--no-such-flag", "--out", "x"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
}

#[test]
fn register_rejects_mismatched_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "24", "1");
    synth(&b, "16,16,20", "1");
    let out = patchreg(&[
        "register",
        "--checkpoint",
        p(&tmp.path().join("none.ivc")),
        "--source",
        p(&a.join("source.ivl")),
        "--target",
        p(&b.join("target.ivl")),
        "--out",
        p(&tmp.path().join("reg")),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[24, 24, 24]") && err.contains("[16, 16, 20]"), "{err}");
}

#[test]
fn missing_input_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = patchreg(&[
        "diffimg",
        "--a",
        p(&tmp.path().join("nope.ivl")),
        "--b",
        p(&tmp.path().join("nope.ivl")),
        "--out",
        p(&tmp.path().join("d.png")),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}

#[test]
fn pipeline_improves_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = tmp.path().join("pair");
    let run = tmp.path().join("run");
    let reg = tmp.path().join("reg");
    synth(&pair, "32", "2");

    assert_ok(&patchreg(&[
        "sample",
        "--source",
        p(&pair.join("source.ivl")),
        "--target",
        p(&pair.join("target.ivl")),
        "--count",
        "20",
        "--patch-size",
        "16",
        "--seed",
        "2",
        "--out",
        p(&tmp.path().join("patches.csv")),
        "--archive",
        p(&tmp.path().join("patches.ivp")),
    ]));
    let csv = std::fs::read_to_string(tmp.path().join("patches.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    assert_ok(&patchreg(&[
        "--deterministic",
        "train",
        "--volume",
        p(&pair.join("source.ivl")),
        "--volume",
        p(&pair.join("target.ivl")),
        "--iterations",
        "200",
        "--patch-size",
        "16",
        "--base-channels",
        "4",
        "--patches-per-pair",
        "200",
        "--lr-generator",
        "1e-3",
        "--lr-discriminator",
        "1e-3",
        "--seed",
        "2",
        "--out",
        p(&run),
    ]));
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 200);
    assert!(run.join("checkpoint-00000200.ivc").is_file());

    assert_ok(&patchreg(&[
        "register",
        "--checkpoint",
        p(&run),
        "--source",
        p(&pair.join("source.ivl")),
        "--target",
        p(&pair.join("target.ivl")),
        "--overlap",
        "4",
        "--out",
        p(&reg),
    ]));

    let metrics = tmp.path().join("metrics.json");
    assert_ok(&patchreg(&[
        "evaluate",
        "--fixed",
        p(&pair.join("target.ivl")),
        "--moving",
        p(&pair.join("source.ivl")),
        "--moved",
        p(&reg.join("warped_source.ivl")),
        "--field",
        p(&reg.join("flow_backward.ivf")),
        "--fixed-landmarks",
        p(&pair.join("landmarks_target.csv")),
        "--moving-landmarks",
        p(&pair.join("landmarks.csv")),
        "--out",
        p(&metrics),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    let (before, after) = (report["cc_before"].as_f64().unwrap(), report["cc_after"].as_f64().unwrap());
    assert!(before < after, "cc {before} -> {after}");
    assert!(report["landmarks"]["mean_mm"].as_f64().unwrap().is_finite());
    assert!(metrics.with_file_name("metrics.json.manifest.json").is_file());

    assert_ok(&patchreg(&[
        "landmarks",
        "--fixed",
        p(&pair.join("landmarks_target.csv")),
        "--moving",
        p(&pair.join("landmarks.csv")),
        "--field",
        p(&pair.join("truth.ivf")),
        "--out",
        p(&tmp.path().join("lm.csv")),
    ]));
    let lm = std::fs::read_to_string(tmp.path().join("lm.csv")).unwrap();
    assert!(lm.contains("Avg"));

    assert_ok(&patchreg(&[
        "diffimg",
        "--a",
        p(&pair.join("target.ivl")),
        "--b",
        p(&reg.join("warped_source.ivl")),
        "--out",
        p(&tmp.path().join("diff.png")),
        "--overlay",
        p(&tmp.path().join("overlay.png")),
    ]));
    assert!(tmp.path().join("overlay.png").is_file());
}
