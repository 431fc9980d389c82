use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn nirom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nirom"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nirom(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_in(dir: &Path, args: &[&str], stage: &str) {
    let out = nirom(dir, args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("[{stage}]")), "{args:?}: {err}");
}

const LINEAR: &str = r#"{"kind": "linear_system", "eigenvalues": [{"re": 0.97}, {"re": 0.9, "im": 0.3}],
    "n": 40, "m": 50, "dt": 0.1, "seed": 3}"#;

fn max_rel_err(path: &Path) -> f64 {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[3].parse::<f64>().unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn gen_pod_dmd_predict_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--spec", LINEAR, "--out", "snaps.nsnp"]);
    assert!(d.join("snaps.nsnp.truth.json").exists());
    ok(d, &["pod", "--input", "snaps.nsnp", "--out", "basis.nsnp", "--modes", "3", "--latent-out", "z.nsnp"]);
    ok(d, &["dmd-fit", "--input", "z.nsnp", "--out", "dmd.json"]);
    assert!(d.join("dmd.json.spectrum.csv").exists());
    ok(
        d,
        &[
            "predict", "--kind", "dmd", "--model", "dmd.json", "--latent", "z.nsnp", "--start", "0", "--end", "4.9",
            "--dt", "0.1", "--basis", "basis.nsnp", "--out", "pred.nsnp",
        ],
    );
    ok(d, &["eval", "--truth", "snaps.nsnp", "--pred", "pred.nsnp", "--out", "errors.csv"]);
    let worst = max_rel_err(&d.join("errors.csv"));
    assert!(worst < 1e-6, "relative error {worst}");
}

#[test]
fn rbf_and_node_models_predict_on_a_finer_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--spec", LINEAR, "--out", "snaps.nsnp"]);
    ok(d, &["pod", "--input", "snaps.nsnp", "--out", "basis.nsnp", "--tau", "1e-6", "--latent-out", "z.nsnp"]);
    ok(d, &["rbf-fit", "--latent", "z.nsnp", "--shape-c", "1", "--out", "rbf.nsnp"]);
    let args = ["--latent", "z.nsnp", "--start", "0", "--end", "6", "--dt", "0.05"];
    ok(d, &[&["predict", "--kind", "rbf", "--model", "rbf.nsnp", "--out", "zr.nsnp"][..], &args].concat());
    fails_in(
        d,
        &["predict", "--kind", "rbf", "--model", "rbf.nsnp", "--latent", "z.nsnp", "--start", "0", "--end", "6", "--dt", "0.03", "--out", "x.nsnp"],
        "config",
    );

    let cfg = json!({
        "arch": "node3",
        "train": {"epochs": 20, "optimizer": {"algorithm": {"name": "adam"}, "lr": 1e-3, "schedule": {"kind": "constant"}}},
        "seed": 4
    });
    let out = ok(d, &["node-train", "--latent", "z.nsnp", "--config", &cfg.to_string(), "--out", "node.ckpt"]);
    assert!(out.contains("over 20 epochs"), "{out}");
    assert!(d.join("node.ckpt.history.csv").exists());
    ok(d, &[&["predict", "--kind", "node", "--model", "node.ckpt", "--out", "zn.nsnp"][..], &args].concat());
}

#[test]
fn ae_train_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = r#"{"kind": "periodic_wake", "modes": [{"frequency": 0.6, "amplitude": 1.0}],
        "n": 40, "m": 30, "dt": 0.05, "seed": 2, "fields": ["p", "vx"]}"#;
    ok(d, &["gen", "--spec", spec, "--out", "wake.nsnp"]);
    ok(
        d,
        &["ae-train", "--input", "wake.nsnp", "--spec", r#"{"latent": 2}"#, "--epochs", "10", "--field", "p", "--out", "ae"],
    );
    for suffix in ["enc", "dec", "history.csv", "scaling.json", "latent.nsnp"] {
        assert!(d.join(format!("ae.{suffix}")).exists(), "missing ae.{suffix}");
    }
    fails_in(d, &["ae-train", "--input", "wake.nsnp", "--spec", r#"{"latent": 2}"#, "--field", "q", "--out", "ae2"], "data");
}

fn pipeline_config(name: &str) -> Value {
    json!({
        "schema_version": 1,
        "name": name,
        "data": {"generator": serde_json::from_str::<Value>(LINEAR).unwrap()},
        "train_window": {"start": 0.0, "end": 4.9, "dt": 0.1},
        "predict_window": {"start": 0.0, "end": 6.0, "dt": 0.1},
        "reducer": {"kind": "pod", "truncation": {"criterion": "fixed", "modes": 3}, "per_field": false},
        "propagator": {"kind": "dmd"},
        "output_dir": format!("runs/{name}"),
        "seed": 1
    })
}

#[test]
fn run_and_compare_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.json"), pipeline_config("a").to_string()).unwrap();
    std::fs::write(d.join("b.json"), pipeline_config("b").to_string()).unwrap();
    ok(d, &["run", "a.json"]);
    assert!(d.join("runs/a/summary.json").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_nirom"))
        .current_dir(d)
        .env("NIROM_THREADS", "1")
        .args(["compare", "a.json", "b.json", "--out", "cmp"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "time,00_a_rmse,00_a_rel_err,01_b_rmse,01_b_rel_err");
    assert_eq!(text.lines().count(), 1 + 61);
}

#[test]
fn failures_exit_nonzero_with_a_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails_in(d, &["pod", "--input", "missing.nsnp", "--out", "b.nsnp", "--modes", "2"], "data");
    fails_in(d, &["gen", "--spec", r#"{"kind": "nope"}"#, "--out", "x.nsnp"], "config");
    ok(d, &["gen", "--spec", LINEAR, "--out", "snaps.nsnp"]);
    fails_in(d, &["dmd-fit", "--input", "snaps.nsnp", "--rank", "45", "--out", "dmd.json"], "propagate");

    let mut cfg = pipeline_config("bad");
    cfg["propagator"] = json!({"kind": "dmd", "rank": 10});
    std::fs::write(d.join("bad.json"), cfg.to_string()).unwrap();
    fails_in(d, &["run", "bad.json"], "propagate");
    assert!(d.join("runs/bad/FAILED").exists());
    fails_in(d, &["run", "nothing.json"], "config");
}
