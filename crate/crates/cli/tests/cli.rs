use std::path::Path;
use std::process::{Command, Output};

fn alam(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alam")).args(args).env("ALAM_OUT_ROOT", root).output().expect("spawn alam")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"{
  "world": {"resolution": 16},
  "encoder": {"patch_size": 8, "hidden": 16, "layers": 1, "heads": 2, "queries": 2, "latent_dim": 4, "mlp_ratio": 2},
  "quantizer": {"codebook_size": 3},
  "decoder": {"hidden": 16, "blocks": 1, "heads": 2, "latent_tokens": 2, "mlp_ratio": 2},
  "pretrain": {"episodes": 6, "episode_len": 12, "batch_size": 2, "steps": 3, "steps_per_epoch": 2,
               "gaps": {"min": 1, "max": 2}, "test_fraction": 0.34},
  "probe": {"grid": {"stride": 2, "multiples": [1, 2, 3, 4, 5], "supervised": [1, 2]}, "n_anchors": 4},
  "policy": {"net": {"hidden": 16, "layers": 1, "heads": 2, "mlp_ratio": 2, "pool": 4}, "horizon": 4, "replan": 2,
             "batch_size": 4, "steps": 3, "demos": 3, "eval_episodes": 3, "max_episode_steps": 8}
}"#;

#[test]
fn print_config_and_validation_errors() {
    let root = tempfile::tempdir().unwrap();
    let o = alam(&["print-config"], root.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"latent_dim\": 32"));
    let o = alam(&["print-config", "--set", "encoder.latnet_dim=3"], root.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("latnet_dim"));
    let o = alam(&["print-config", "--set", "preset=paper"], root.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"latent_dim\": 128"));
}

#[test]
fn full_pipeline_on_a_tiny_config() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let cfg = r.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let p = |s: &str| r.join(s).to_str().unwrap().to_string();

    assert_eq!(code(&alam(&["gen-data", "--config", c, "--out", "data"], r)), 0);
    // Refuses to overwrite without --force.
    assert_eq!(code(&alam(&["gen-data", "--config", c, "--out", "data"], r)), 2);
    assert_eq!(code(&alam(&["gen-data", "--config", c, "--out", "data", "--force"], r)), 0);

    let o = alam(&["pretrain", "--config", c, "--out", "pre", "--data", &p("data")], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = alam(&["pretrain", "--config", c, "--out", "pre", "--data", &p("data"), "--resume", "--set", "pretrain.steps=4"], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = alam(&["probe", "--config", c, "--out", "probe", "--checkpoint", &p("pre/checkpoint"), "--data", &p("data")], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(r.join("probe/probe.json").exists());

    let o = alam(&["train-policy", "--config", c, "--out", "pol", "--encoder", &p("pre/checkpoint")], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = alam(&["eval-policy", "--config", c, "--out", "ev", "--checkpoint", &p("pol/checkpoint"), "--intervention", "block"], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(r.join("ev/eval_block.json").exists());
    let o = alam(&["eval-policy", "--config", c, "--out", "ev2", "--checkpoint", &p("pol/checkpoint"), "--intervention", "melt"], r);
    assert_eq!(code(&o), 2);

    let o = alam(&["intervene", "--config", c, "--out", "iv", "--checkpoint", &p("pol/checkpoint")], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let probe_arg = format!("alam={}", p("probe/probe.json"));
    let o = alam(&["plot", "--config", c, "--out", "plots", "--probe", &probe_arg, "--interventions", &p("iv/interventions.json")], r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(r.join("plots")).unwrap().count(), 9);
}

#[test]
fn empty_report_plots_nothing() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let report = r#"{"encoder_id":"x","checkpoint":null,"grid":{"stride":5,"multiples":[1],"supervised":[1]},
                     "norm":"l2","requested_anchors":0,"skipped_anchors":0,"perceptual_metric":"p","rows":[]}"#;
    std::fs::write(r.join("empty.json"), report).unwrap();
    let arg = format!("a={}", r.join("empty.json").display());
    let o = alam(&["plot", "--out", "plots", "--probe", &arg], r);
    assert_ne!(code(&o), 0);
    assert!(!r.join("plots").exists());
}
