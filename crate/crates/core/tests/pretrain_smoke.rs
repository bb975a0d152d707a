mod common;

use std::fs;

use alam_core::harness::{generate_data, load_checkpoint, run_pretrain, run_probe, CHECKPOINT_DIR, METRICS_FILE};
use alam_core::pretrain::{AlamModel, Pretrainer, TrainBatch};
use candle_core::DType;

use common::tiny_run;

/// Threshold for the smoke run: loss on a fixed batch after training must
/// drop below this fraction of its initial value.
const SMOKE_RATIO: f64 = 0.9;

#[test]
fn loss_falls_on_a_ten_episode_set() {
    let run = tiny_run(&["pretrain.steps=500"]);
    let (ds, split) = generate_data(&run).unwrap();
    assert_eq!(ds.len(), 10);
    let model = AlamModel::new(&run.model_spec(), run.module_seed("model")).unwrap();
    let mut t = Pretrainer::new(model, run.pretrain.clone(), 1).unwrap();

    let f = ds.episodes[split.train[0]].frames(alam_core::View::Global);
    let g = ds.episodes[split.train[1]].frames(alam_core::View::Wrist);
    let trips = [[&f[0], &f[2], &f[6]], [&f[5], &f[8], &f[9]], [&g[1], &g[3], &g[4]], [&g[7], &g[10], &g[15]]];
    let batch = TrainBatch::from_triplets(&trips, run.encoder.patch_size, DType::F32).unwrap();
    // First step seeds the codebook; measure from there.
    t.step(&ds, &split.train).unwrap();
    let before = t.model.forward(&batch, &t.loss_options()).unwrap().breakdown.total;
    while t.step < 500 {
        t.step(&ds, &split.train).unwrap();
    }
    let after = t.model.forward(&batch, &t.loss_options()).unwrap().breakdown.total;
    assert!(after < SMOKE_RATIO * before, "total loss {before} -> {after}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full = tiny_run(&["pretrain.steps=10", "pretrain.steps_per_epoch=5"]);
    let (ds, split) = generate_data(&full).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_pretrain(&full, &ds, &split, &a, None).unwrap();

    let mut half = full.clone();
    half.pretrain.steps = 5;
    run_pretrain(&half, &ds, &split, &b, None).unwrap();
    let ck = load_checkpoint(&b.join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(ck.step, 5);
    run_pretrain(&full, &ds, &split, &b, Some(&ck)).unwrap();

    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
    let ca = load_checkpoint(&a.join(CHECKPOINT_DIR)).unwrap();
    let cb = load_checkpoint(&b.join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(ca.blobs, cb.blobs);
    assert_eq!(ca.rng, cb.rng);
    assert_eq!(ca.extra, cb.extra);
}

#[test]
fn probe_is_a_pure_function_of_checkpoint_split_and_seed() {
    let run = tiny_run(&["pretrain.steps=3"]);
    let (ds, split) = generate_data(&run).unwrap();
    assert!(split.train.iter().all(|e| !split.test.contains(e)));
    let tmp = tempfile::tempdir().unwrap();
    let t = run_pretrain(&run, &ds, &split, tmp.path(), None).unwrap();
    let r1 = run_probe(&run, &t.model, &ds, &split).unwrap();
    let r2 = run_probe(&run, &t.model, &ds, &split).unwrap();
    assert_eq!(r1, r2);
    assert!(!r1.is_empty());
    assert_eq!(r1.row(1).unwrap().add, 0.0);
}
