use std::fs;
use std::path::Path;

use nirom_core::autoencoder;
use nirom_core::metrics::mse;
use nirom_core::pipeline::{self, PipelineConfig, Stage, FAILURE_MARKER};
use nirom_core::snapstore::{self, Direction, ScalingParams};
use nirom_core::synthgen::{self, GeneratorSpec};
use serde_json::{json, Value};

fn linear_data() -> Value {
    json!({"generator": {
        "kind": "linear_system",
        "eigenvalues": [{"re": 0.97}, {"re": 0.9, "im": 0.3}],
        "n": 40, "m": 50, "dt": 0.1, "seed": 3
    }})
}

fn config(dir: &Path, data: Value, train: [f64; 3], predict: [f64; 3], reducer: Value, propagator: Value) -> PipelineConfig {
    let w = |v: [f64; 3]| json!({"start": v[0], "end": v[1], "dt": v[2]});
    let v = json!({
        "schema_version": 1,
        "name": "t",
        "data": data,
        "train_window": w(train),
        "predict_window": w(predict),
        "reducer": reducer,
        "propagator": propagator,
        "output_dir": dir,
        "seed": 5
    });
    serde_json::from_value(v).unwrap()
}

fn pod(modes: usize) -> Value {
    json!({"kind": "pod", "truncation": {"criterion": "fixed", "modes": modes}, "per_field": false})
}

fn dmd(rank: Option<usize>) -> Value {
    json!({"kind": "dmd", "rank": rank})
}

const TRAIN: [f64; 3] = [0.0, 4.9, 0.1];

#[test]
fn full_rank_dmd_reproduces_the_training_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), linear_data(), TRAIN, TRAIN, pod(3), dmd(None));
    let rep = pipeline::run(&cfg).unwrap();
    assert_eq!(rep.summary.propagator.rank, Some(3));
    let errors = rep.errors.unwrap();
    let worst = errors.aggregate().rel_err.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-6, "relative error {worst}");
    assert_eq!(rep.summary.extrapolation.count, 0);
    assert!(dir.path().join("summary.json").exists());
    assert!(!dir.path().join(FAILURE_MARKER).exists());
}

#[test]
fn identical_configs_give_identical_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), linear_data(), TRAIN, [0.0, 6.0, 0.1], pod(3), dmd(Some(3)));
    let cmp = pipeline::compare(&[cfg.clone(), cfg], dir.path(), 2).unwrap();
    assert_eq!(cmp.labels, ["00_t", "01_t"]);
    let mut r = csv::Reader::from_path(dir.path().join("comparison.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(header.len(), 5);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[1], rec[3]);
        assert_eq!(rec[2], rec[4]);
        rows += 1;
    }
    assert_eq!(rows, cmp.times.len());
}

#[test]
fn compare_rejects_mismatched_windows() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), linear_data(), TRAIN, TRAIN, pod(3), dmd(None));
    let b = config(dir.path(), linear_data(), TRAIN, [0.0, 6.0, 0.1], pod(3), dmd(None));
    let err = pipeline::compare(&[a, b], dir.path(), 1).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
}

#[test]
fn swapping_the_propagator_leaves_reducer_artifacts_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(&dir.path().join("a"), linear_data(), TRAIN, [0.0, 6.0, 0.05], pod(3), dmd(None));
    let b = config(
        &dir.path().join("b"),
        linear_data(),
        TRAIN,
        [0.0, 6.0, 0.05],
        pod(3),
        json!({"kind": "rbf", "config": {"shape": 1.0}}),
    );
    let ra = pipeline::run(&a).unwrap();
    let rb = pipeline::run(&b).unwrap();
    for name in ["basis.nsnp", "latent_train.nsnp"] {
        let x = fs::read(ra.output_dir.join(name)).unwrap();
        let y = fs::read(rb.output_dir.join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    assert_eq!(ra.prediction.n_cols(), rb.prediction.n_cols());
    assert!(rb.errors.unwrap().is_finite());
}

#[test]
fn failure_leaves_a_stage_tagged_marker() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), linear_data(), TRAIN, TRAIN, pod(3), dmd(Some(10)));
    let err = pipeline::run(&bad).unwrap_err();
    assert_eq!(err.stage, Stage::Propagate);
    assert!(err.to_string().starts_with("[propagate]"));
    let marker: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(FAILURE_MARKER)).unwrap()).unwrap();
    assert_eq!(marker["stage"], "propagate");
    assert!(!dir.path().join("summary.json").exists());

    let good = config(dir.path(), linear_data(), TRAIN, TRAIN, pod(3), dmd(None));
    pipeline::run(&good).unwrap();
    assert!(!dir.path().join(FAILURE_MARKER).exists());
}

#[test]
fn invalid_configs_fail_in_the_config_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), linear_data(), TRAIN, [0.05, 6.0, 0.1], pod(3), dmd(None));
    assert_eq!(pipeline::run(&cfg).unwrap_err().stage, Stage::Config);
    cfg.predict_window.start = 0.0;
    cfg.schema_version = 2;
    assert_eq!(pipeline::run(&cfg).unwrap_err().stage, Stage::Config);
}

#[test]
fn extrapolation_flags_mark_times_past_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), linear_data(), TRAIN, [0.0, 5.9, 0.05], pod(3), dmd(None));
    let rep = pipeline::run(&cfg).unwrap();
    let ex = &rep.summary.extrapolation;
    assert_eq!(ex.flags.len(), 119);
    assert_eq!(ex.count, 20);
    assert!((ex.first_time.unwrap() - 4.95).abs() < 1e-9);
    assert!(ex.flags[..99].iter().all(|f| !f));
    let errors = rep.summary.errors.unwrap();
    assert!(errors.mean_rel_err_outside.is_some() && errors.finite);
}

fn wake_data() -> Value {
    json!({"generator": {
        "kind": "periodic_wake",
        "modes": [{"frequency": 0.6, "amplitude": 1.0}],
        "n": 40, "m": 30, "dt": 0.05, "seed": 2,
        "fields": ["p", "vx"]
    }})
}

fn ae(latent: &[usize]) -> Value {
    json!({"kind": "ae", "latent": latent, "preset": "ae1", "train": {"epochs": 40}})
}

#[test]
fn autoencoders_reduce_fields_independently() {
    let dir = tempfile::tempdir().unwrap();
    let w = [0.0, 1.45, 0.05];
    let a = config(&dir.path().join("a"), wake_data(), w, w, ae(&[2, 1]), dmd(Some(2)));
    let b = config(&dir.path().join("b"), wake_data(), w, w, ae(&[2, 3]), dmd(Some(2)));
    let ra = pipeline::run(&a).unwrap();
    let rb = pipeline::run(&b).unwrap();
    assert_eq!(ra.summary.reducer.latent_dims, [2, 1]);
    assert_eq!(rb.summary.reducer.latent_dims, [2, 3]);
    for ext in ["enc", "dec"] {
        let name = format!("ae_p.{ext}");
        assert_eq!(fs::read(ra.output_dir.join(&name)).unwrap(), fs::read(rb.output_dir.join(&name)).unwrap());
    }
    assert_ne!(fs::read(ra.output_dir.join("ae_vx.dec")).unwrap(), fs::read(rb.output_dir.join("ae_vx.dec")).unwrap());
}

#[test]
fn autoencoder_final_losses_match_scaled_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let w = [0.0, 1.45, 0.05];
    let cfg = config(dir.path(), wake_data(), w, w, ae(&[2]), dmd(Some(2)));
    let rep = pipeline::run(&cfg).unwrap();
    let losses = rep.summary.reducer.final_losses.clone().unwrap();

    let spec: GeneratorSpec = serde_json::from_value(wake_data()["generator"].clone()).unwrap();
    let (set, _) = synthgen::generate::<f64>(&spec).unwrap();
    let scaling: ScalingParams<f64> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("scaling.json")).unwrap()).unwrap();
    let scaled = snapstore::apply_scaling(&set, &scaling, Direction::Forward).unwrap();
    for (i, seg) in scaled.fields().iter().enumerate() {
        let model = autoencoder::load_ae::<f64>(dir.path().join(format!("ae_{}", seg.name))).unwrap();
        let field = scaled.field_set(seg).unwrap();
        let rec = model.reconstruct(field.data()).unwrap();
        let got = mse(field.data(), &rec).unwrap();
        assert!((got - losses[i]).abs() <= 1e-12 * losses[i].max(1e-300), "{got} vs {}", losses[i]);
    }
}

#[test]
fn pod_and_ae_on_a_translating_pulse_share_the_prediction_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = json!({"generator": {
        "kind": "traveling_wave", "speed": 10.0, "width": 2.0, "center": 5.0,
        "n": 32, "m": 40, "dt": 0.05, "seed": 1
    }});
    let w = [0.0, 1.95, 0.05];
    let p = [0.0, 2.4, 0.05];
    let a = config(dir.path(), data.clone(), w, p, pod(4), dmd(None));
    let b = config(dir.path(), data, w, p, ae(&[4]), dmd(Some(3)));
    let cmp = pipeline::compare(&[a, b], dir.path(), 2).unwrap();
    let lens: Vec<usize> = cmp.reports.iter().map(|r| r.errors.as_ref().unwrap().times.len()).collect();
    assert_eq!(lens, [cmp.times.len(), cmp.times.len()]);
    assert_eq!(cmp.reports[0].summary.extrapolation, cmp.reports[1].summary.extrapolation);
}

#[test]
fn file_sources_skip_scoring_past_the_recorded_times() {
    let dir = tempfile::tempdir().unwrap();
    let spec: GeneratorSpec = serde_json::from_value(linear_data()["generator"].clone()).unwrap();
    let (set, _) = synthgen::generate::<f64>(&spec).unwrap();
    let path = dir.path().join("snaps.nsnp");
    snapstore::save(&set, &path).unwrap();
    let cfg = config(&dir.path().join("run"), json!({"file": {"path": path}}), TRAIN, [0.0, 5.5, 0.1], pod(3), dmd(None));
    let rep = pipeline::run(&cfg).unwrap();
    assert!(rep.errors.is_none() && rep.summary.errors.is_none());
    assert_eq!(rep.prediction.n_cols(), 56);

    let cfg = config(
        &dir.path().join("scored"),
        json!({"file": {"path": path}}),
        TRAIN,
        TRAIN,
        pod(3),
        dmd(None),
    );
    assert!(pipeline::run(&cfg).unwrap().errors.unwrap().is_finite());
}
