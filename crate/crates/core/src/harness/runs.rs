//! End-to-end run steps shared by the CLI and the integration tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedBlob};
use super::config::RunConfig;
use super::metrics::{MetricRecord, MetricsLog};
use crate::error::{AlamError, Result};
use crate::nn::{from_f64, to_f64_vec, ParamStore};
use crate::optim::AdamW;
use crate::policy::{
    evaluate, DemoSet, EvalReport, InterventionKind, LatentStats, PolicyArm, PolicyConfig, PolicyModel, PolicyRunner,
    PolicyTrainer,
};
use crate::pretrain::{AlamModel, ModelSpec, Pretrainer};
use crate::probes::{probe_report, ProbeReport, TransitionEncoder};
use crate::quantizer::Codebook;
use crate::rng::Rng;
use crate::synthworld::{Dataset, EpisodeSplit};

pub const DATASET_DIR: &str = "dataset";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Refuses to reuse a non-empty directory unless `force` is set, in which
/// case its contents are removed.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(AlamError::OutputExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn check_split(split: &EpisodeSplit, n: usize) -> Result<()> {
    let train: BTreeSet<_> = split.train.iter().collect();
    let test: BTreeSet<_> = split.test.iter().collect();
    if train.len() != split.train.len() || test.len() != split.test.len() {
        return Err(AlamError::invalid("split lists contain duplicates"));
    }
    if train.intersection(&test).next().is_some() {
        return Err(AlamError::invalid("train and test episodes overlap"));
    }
    if split.train.iter().chain(&split.test).any(|&i| i >= n) {
        return Err(AlamError::invalid("split refers to a missing episode"));
    }
    Ok(())
}

pub fn generate_data(run: &RunConfig) -> Result<(Dataset, EpisodeSplit)> {
    let ds = Dataset::generate(&run.world, run.pretrain.episodes, run.pretrain.episode_len, run.module_seed("data"))?;
    let split = ds.split(run.module_seed("split"), run.pretrain.test_fraction);
    check_split(&split, ds.len())?;
    Ok((ds, split))
}

pub fn write_data(dir: &Path, run: &RunConfig, ds: &Dataset, split: &EpisodeSplit) -> Result<()> {
    ds.write(&dir.join(DATASET_DIR))?;
    write_json(&dir.join(SPLIT_FILE), split)?;
    write_json(&dir.join(CONFIG_FILE), run)
}

pub fn read_data(dir: &Path) -> Result<(Dataset, EpisodeSplit)> {
    let ds = Dataset::read(&dir.join(DATASET_DIR))?;
    let split: EpisodeSplit = read_json(&dir.join(SPLIT_FILE))?;
    check_split(&split, ds.len())?;
    Ok((ds, split))
}

fn export_blobs(params: &ParamStore, prefix: &str) -> Result<Vec<NamedBlob>> {
    Ok(params
        .export()?
        .into_iter()
        .map(|(name, shape, data)| NamedBlob { name: format!("{prefix}{name}"), shape, data })
        .collect())
}

fn import_blobs(params: &ParamStore, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let map: BTreeMap<String, (Vec<usize>, Vec<f64>)> = ckpt
        .blobs
        .iter()
        .filter_map(|b| b.name.strip_prefix(prefix).map(|n| (n.to_string(), (b.shape.clone(), b.data.clone()))))
        .collect();
    params.import(&map)
}

fn optimizer_blobs(opt: &AdamW) -> Result<Vec<NamedBlob>> {
    let (_, moments) = opt.state();
    let mut out = Vec::new();
    for (name, (m, v)) in moments {
        for (tag, t) in [("m", m), ("v", v)] {
            out.push(NamedBlob { name: format!("optim.{tag}/{name}"), shape: t.dims().to_vec(), data: to_f64_vec(t)? });
        }
    }
    Ok(out)
}

fn restore_optimizer(opt: &mut AdamW, ckpt: &Checkpoint, dtype: candle_core::DType) -> Result<()> {
    let mut moments = BTreeMap::new();
    for b in &ckpt.blobs {
        if let Some(name) = b.name.strip_prefix("optim.m/") {
            let v = ckpt
                .blob(&format!("optim.v/{name}"))
                .ok_or_else(|| AlamError::invalid(format!("checkpoint lacks second moment of {name}")))?;
            moments.insert(name.to_string(), (from_f64(&b.data, &b.shape, dtype)?, from_f64(&v.data, &v.shape, dtype)?));
        }
    }
    opt.restore(ckpt.optimizer_step, moments);
    Ok(())
}

fn rng_state(rng: &Rng) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(rng)?)
}

// ---------------------------------------------------------------- pretrain

pub fn pretrain_checkpoint(t: &Pretrainer, run: &RunConfig) -> Result<Checkpoint> {
    let mut blobs = export_blobs(&t.model.params, "model/")?;
    blobs.extend(optimizer_blobs(&t.optimizer)?);
    Ok(Checkpoint {
        kind: "pretrain".into(),
        step: t.step,
        config: serde_json::to_value(run)?,
        dtype: t.model.spec.precision,
        blobs,
        optimizer_step: t.optimizer.step_count(),
        rng: Some(rng_state(&t.rng)?),
        extra: json!({
            "spec": t.model.spec,
            "codebook": t.model.codebook,
            "codebook_ready": t.model.codebook_ready,
        }),
    })
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(AlamError::invalid(format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
    }
    Ok(())
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<AlamModel> {
    expect_kind(ckpt, "pretrain")?;
    let spec: ModelSpec = serde_json::from_value(ckpt.extra["spec"].clone())?;
    let mut model = AlamModel::new(&spec, 0)?;
    import_blobs(&model.params, ckpt, "model/")?;
    model.codebook = serde_json::from_value::<Codebook>(ckpt.extra["codebook"].clone())?;
    model.codebook_ready = ckpt.extra["codebook_ready"].as_bool().unwrap_or(true);
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<AlamModel> {
    model_from_checkpoint(&load_checkpoint(dir)?)
}

pub fn pretrainer_from_checkpoint(ckpt: &Checkpoint, run: &RunConfig) -> Result<Pretrainer> {
    let model = model_from_checkpoint(ckpt)?;
    let mut t = Pretrainer::new(model, run.pretrain.clone(), run.module_seed("pretrain"))?;
    restore_optimizer(&mut t.optimizer, ckpt, t.model.dtype())?;
    if let Some(r) = &ckpt.rng {
        t.rng = serde_json::from_value(r.clone())?;
    }
    t.step = ckpt.step;
    Ok(t)
}

fn pretrain_record(r: &crate::pretrain::StepRecord, mode: &str) -> MetricRecord {
    let b = &r.breakdown;
    let scalars = BTreeMap::from([
        ("l_vq".to_string(), b.l_vq),
        ("l_rec".to_string(), b.l_rec),
        ("l_perc".to_string(), b.l_perc),
        ("l_add".to_string(), b.l_add),
        ("l_rev".to_string(), b.l_rev),
        ("total".to_string(), b.total),
        ("grad_norm".to_string(), r.grad_norm),
        ("codes_used".to_string(), r.codes_used as f64),
    ]);
    MetricRecord { step: r.step + 1, scalars, tags: BTreeMap::from([("mode".to_string(), mode.to_string())]) }
}

/// Trains until `run.pretrain.steps`, logging to `out` and checkpointing at
/// every epoch boundary. With `resume`, continues from that checkpoint.
pub fn run_pretrain(run: &RunConfig, ds: &Dataset, split: &EpisodeSplit, out: &Path, resume: Option<&Checkpoint>) -> Result<Pretrainer> {
    check_split(split, ds.len())?;
    let (mut t, mut log) = match resume {
        Some(ck) => (pretrainer_from_checkpoint(ck, run)?, MetricsLog::resume(out, ck.step)?),
        None => {
            let model = AlamModel::new(&run.model_spec(), run.module_seed("model"))?;
            (Pretrainer::new(model, run.pretrain.clone(), run.module_seed("pretrain"))?, MetricsLog::create(out)?)
        }
    };
    write_json(&out.join(CONFIG_FILE), run)?;
    let mode = run.pretrain.mode.name();
    while t.step < run.pretrain.steps {
        let rec = t.step(ds, &split.train)?;
        if t.step % run.log_every == 0 || t.step == run.pretrain.steps {
            log.record(&pretrain_record(&rec, mode))?;
        }
        if t.epoch_done() || t.step == run.pretrain.steps {
            log.flush()?;
            save_checkpoint(&pretrain_checkpoint(&t, run)?, &out.join(CHECKPOINT_DIR))?;
        }
    }
    log.flush()?;
    Ok(t)
}

pub fn run_probe(run: &RunConfig, model: &AlamModel, ds: &Dataset, split: &EpisodeSplit) -> Result<ProbeReport> {
    let mut report = probe_report(model, model, ds, &split.test, &run.probe, run.module_seed("probe"))?;
    report.check_invariants()?;
    report.checkpoint = None;
    Ok(report)
}

// ------------------------------------------------------------------ policy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PolicyExtra {
    policy: PolicyConfig,
    latent_dim: usize,
    latent_stats: Option<LatentStats>,
    encoder_id: Option<String>,
}

pub fn policy_checkpoint(t: &PolicyTrainer, run: &RunConfig, encoder_id: Option<String>) -> Result<Checkpoint> {
    let mut blobs = export_blobs(&t.model.params, "policy/")?;
    blobs.extend(optimizer_blobs(&t.optimizer)?);
    let extra = PolicyExtra {
        policy: t.model.config.clone(),
        latent_dim: t.model.latent_dim,
        latent_stats: t.model.latent_stats.clone(),
        encoder_id,
    };
    Ok(Checkpoint {
        kind: "policy".into(),
        step: t.step,
        config: serde_json::to_value(run)?,
        dtype: t.model.config.precision,
        blobs,
        optimizer_step: t.optimizer.step_count(),
        rng: Some(rng_state(&t.rng)?),
        extra: serde_json::to_value(extra)?,
    })
}

pub fn policy_from_checkpoint(ckpt: &Checkpoint) -> Result<PolicyModel> {
    expect_kind(ckpt, "policy")?;
    let extra: PolicyExtra = serde_json::from_value(ckpt.extra.clone())?;
    let model = PolicyModel::new(&extra.policy, extra.latent_dim, extra.latent_stats, 0)?;
    import_blobs(&model.params, ckpt, "policy/")?;
    Ok(model)
}

pub fn load_policy(dir: &Path) -> Result<PolicyModel> {
    policy_from_checkpoint(&load_checkpoint(dir)?)
}

/// Expert demonstrations for the configured arm; latents are extracted
/// only when the arm consumes them.
pub fn policy_demos(run: &RunConfig, encoder: Option<&dyn TransitionEncoder>) -> Result<DemoSet> {
    let enc = if run.policy.arm.uses_latents() {
        Some(encoder.ok_or_else(|| AlamError::invalid(format!("policy arm {} needs an encoder", run.policy.arm.name())))?)
    } else {
        None
    };
    DemoSet::generate(&run.world, run.policy.demos, run.policy.horizon, run.module_seed("policy.demos"), enc)
}

pub fn run_train_policy(run: &RunConfig, demos: &DemoSet, encoder_id: Option<String>, out: &Path) -> Result<PolicyTrainer> {
    let model = PolicyModel::new(&run.policy, demos.latent_dim(), demos.latent_stats.clone(), run.module_seed("policy.init"))?;
    let mut t = PolicyTrainer::new(model, run.module_seed("policy.train"));
    t.check_demos(demos)?;
    let mut log = MetricsLog::create(out)?;
    write_json(&out.join(CONFIG_FILE), run)?;
    let arm = run.policy.arm.name();
    let ckpt_every = run.pretrain.steps_per_epoch.max(1);
    while t.step < run.policy.steps {
        let rec = t.step(demos)?;
        if t.step % run.log_every == 0 || t.step == run.policy.steps {
            let scalars = BTreeMap::from([
                ("loss".to_string(), rec.loss),
                ("l_th".to_string(), rec.parts[0]),
                ("l_wr".to_string(), rec.parts[1]),
                ("l_u".to_string(), rec.parts[2]),
                ("grad_norm".to_string(), rec.grad_norm),
            ]);
            log.record(&MetricRecord { step: rec.step, scalars, tags: BTreeMap::from([("arm".to_string(), arm.to_string())]) })?;
        }
        if t.step % ckpt_every == 0 || t.step == run.policy.steps {
            log.flush()?;
            save_checkpoint(&policy_checkpoint(&t, run, encoder_id.clone())?, &out.join(CHECKPOINT_DIR))?;
        }
    }
    log.flush()?;
    Ok(t)
}

pub fn run_eval(run: &RunConfig, model: &PolicyModel, intervention: InterventionKind, label: &str) -> Result<EvalReport> {
    if intervention != InterventionKind::None && model.arm() == PolicyArm::ActionOnly {
        return Err(AlamError::invalid("interventions need an arm that generates latents"));
    }
    let runner = PolicyRunner { model, world: run.world.clone(), intervention };
    let mut cfg = run.eval_config();
    cfg.replan = model.config.replan;
    evaluate(&runner, &run.world, &cfg, label, intervention)
}

/// Evaluates every intervention on shared seeds.
pub fn run_intervene(run: &RunConfig, model: &PolicyModel, label: &str) -> Result<Vec<EvalReport>> {
    InterventionKind::ALL.iter().map(|&k| run_eval(run, model, k, label)).collect()
}

pub fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    let name = report.intervention.name();
    let mut summary = report.clone();
    summary.log.clear();
    write_json(&dir.join(format!("eval_{name}.json")), &summary)?;
    let mut lines = String::new();
    for e in &report.log {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    fs::write(dir.join(format!("episodes_{name}.jsonl")), lines)?;
    Ok(())
}

/// Precision-independent byte digest of a parameter store.
pub fn params_digest(params: &ParamStore) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, shape, data) in params.export()? {
        h.update(name.as_bytes());
        for s in shape {
            h.update((s as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}
