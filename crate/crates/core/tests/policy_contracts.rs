mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use alam_core::harness::{
    generate_data, load_policy, params_digest, policy_demos, read_metrics, run_intervene, run_pretrain,
    run_train_policy, CHECKPOINT_DIR,
};
use alam_core::policy::{InterventionKind, PolicyArm};
use alam_core::probes::{OracleEncoder, TransitionEncoder};

use common::tiny_run;

/// Smoke threshold: mean loss over the last window must fall below this
/// fraction of the first window's mean.
const FLOW_SMOKE_RATIO: f64 = 0.8;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn encoder_is_frozen_and_interventions_are_pure() {
    let run = tiny_run(&["pretrain.steps=3", "policy.steps=6"]);
    let (ds, split) = generate_data(&run).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let enc = run_pretrain(&run, &ds, &split, &tmp.path().join("pre"), None).unwrap().model;
    let before = params_digest(&enc.params).unwrap();

    let demos = policy_demos(&run, Some(&enc)).unwrap();
    let out = tmp.path().join("policy");
    run_train_policy(&run, &demos, Some(enc.id()), &out).unwrap();
    assert_eq!(params_digest(&enc.params).unwrap(), before, "policy training touched the encoder");

    let ck = out.join(CHECKPOINT_DIR);
    let files = snapshot(&ck);
    let policy = load_policy(&ck).unwrap();
    let digest = params_digest(&policy.params).unwrap();
    let reports = run_intervene(&run, &policy, "tiny").unwrap();
    assert_eq!(reports.len(), InterventionKind::ALL.len());
    assert_eq!(params_digest(&policy.params).unwrap(), digest);
    assert_eq!(snapshot(&ck), files);
}

#[test]
fn joint_flow_loss_decreases_on_a_hundred_demos() {
    let run = tiny_run(&["policy.demos=100", "policy.steps=2000", "policy.optimizer.lr=0.001", "log_every=1"]);
    let demos = policy_demos(&run, Some(&OracleEncoder)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    run_train_policy(&run, &demos, Some(OracleEncoder.id()), tmp.path()).unwrap();
    let losses: Vec<f64> = read_metrics(tmp.path()).unwrap().iter().map(|r| r.scalars["loss"]).collect();
    assert_eq!(losses.len(), 2000);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&losses[..200]), mean(&losses[1800..]));
    assert!(last < FLOW_SMOKE_RATIO * first, "loss {first} -> {last}");
}

#[test]
fn action_only_arm_needs_no_encoder() {
    let run = tiny_run(&["policy.arm=\"action-only\"", "policy.steps=2"]);
    let demos = policy_demos(&run, None).unwrap();
    assert!(!demos.has_latents());
    let tmp = tempfile::tempdir().unwrap();
    let t = run_train_policy(&run, &demos, None, tmp.path()).unwrap();
    assert_eq!(t.model.arm(), PolicyArm::ActionOnly);
    let joint = tiny_run(&[]);
    assert!(policy_demos(&joint, None).is_err());
}
