use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{AlamError, Result};
use crate::nn::Precision;
use crate::policy::{EvalConfig, PolicyConfig};
use crate::pretrain::{ModelSpec, PretrainConfig};
use crate::probes::{HorizonGrid, ProbeConfig};
use crate::quantizer::QuantizerConfig;
use crate::rng::derive_seed;
use crate::synthworld::{GapRange, WorldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small models that train on one CPU core.
    #[default]
    Desk,
    /// Full-size architecture.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Metric logging interval in optimisation steps.
    pub log_every: u64,
    pub world: WorldConfig,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub decoder: DecoderConfig,
    pub precision: Precision,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            log_every: 10,
            world: WorldConfig::default(),
            encoder: EncoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            decoder: DecoderConfig::default(),
            precision: Precision::F32,
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self { preset, ..Self::default() };
        if preset == Preset::Paper {
            c.world.resolution = 196;
            c.encoder = EncoderConfig {
                patch_size: 14,
                hidden: 768,
                layers: 12,
                heads: 12,
                queries: 256,
                latent_dim: 128,
                ..EncoderConfig::default()
            };
            c.quantizer.codebook_size = 7;
            c.decoder = DecoderConfig { hidden: 768, blocks: 12, heads: 12, ..DecoderConfig::default() };
            c.pretrain.gaps = GapRange { min: 1, max: 16 };
            c.pretrain.episode_len = 96;
            c.probe.grid = HorizonGrid { stride: 16, multiples: vec![1, 2, 3, 4, 5], supervised: vec![1, 2] };
            c.policy.horizon = 16;
        }
        c
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            resolution: self.world.resolution,
            encoder: self.encoder.clone(),
            quantizer: self.quantizer.clone(),
            decoder: self.decoder.clone(),
            precision: self.precision,
        }
    }

    pub fn module_seed(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.policy.eval_episodes,
            max_steps: self.policy.max_episode_steps,
            replan: self.policy.replan,
            seed: self.module_seed("eval"),
        }
    }

    /// Cross-module consistency checks.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |path: &str, message: String| Err(AlamError::Config { path: path.into(), message });
        if self.world.resolution == 0 || self.world.resolution % self.encoder.patch_size != 0 {
            return cfg_err(
                "encoder.patch_size",
                format!("must divide world.resolution {}", self.world.resolution),
            );
        }
        if self.encoder.hidden % self.encoder.heads != 0 {
            return cfg_err("encoder.heads", "must divide encoder.hidden".into());
        }
        if self.decoder.hidden % self.decoder.heads != 0 {
            return cfg_err("decoder.heads", "must divide decoder.hidden".into());
        }
        if self.policy.net.hidden % self.policy.net.heads != 0 {
            return cfg_err("policy.net.heads", "must divide policy.net.hidden".into());
        }
        if self.log_every == 0 {
            return cfg_err("log_every", "must be positive".into());
        }
        self.pretrain.validate()?;
        self.probe.grid.validate()?;
        self.policy.validate()?;
        if self.probe.grid.max_span() + 1 > self.pretrain.episode_len {
            return cfg_err(
                "probe.grid",
                format!(
                    "largest horizon {} does not fit in episodes of {} frames",
                    self.probe.grid.max_span(),
                    self.pretrain.episode_len
                ),
            );
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Splits `a.b.c=value`; the value is parsed as JSON and falls back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| AlamError::Config { path: s.into(), message: "override must look like key.path=value".into() })?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(AlamError::Config { path: key.into(), message: "empty key segment".into() });
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| AlamError::Config {
            path: path[..i].join("."),
            message: "is not a table".into(),
        })?;
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        cur = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn preset_of(v: &Value, where_: &str) -> Result<Option<Preset>> {
    match v.get("preset") {
        None => Ok(None),
        Some(p) => serde_json::from_value(p.clone())
            .map(Some)
            .map_err(|e| AlamError::Config { path: "preset".into(), message: format!("{e} (in {where_})") }),
    }
}

/// Resolves a run configuration: defaults, then the preset, then the file,
/// then `key.path=value` overrides. Unknown keys are rejected.
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            if text.trim().is_empty() {
                Value::Object(Map::new())
            } else {
                serde_json::from_str(&text)
                    .map_err(|e| AlamError::Config { path: p.display().to_string(), message: e.to_string() })?
            }
        }
        None => Value::Object(Map::new()),
    };
    if !file_value.is_object() {
        return Err(AlamError::Config { path: "<root>".into(), message: "config file must hold a JSON object".into() });
    }
    let mut ov = Value::Object(Map::new());
    for s in overrides {
        let (path, value) = parse_override(s)?;
        set_path(&mut ov, &path, value)?;
    }
    let preset = match preset_of(&ov, "overrides")? {
        Some(p) => p,
        None => preset_of(&file_value, "config file")?.unwrap_or_default(),
    };
    let mut value = serde_json::to_value(RunConfig::preset(preset))?;
    merge(&mut value, file_value);
    merge(&mut value, ov);
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        AlamError::Config { path, message: e.into_inner().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_file_gives_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"").unwrap();
        assert_eq!(parse_config(Some(f.path()), &[]).unwrap(), RunConfig::default());
        assert_eq!(parse_config(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn paper_preset_values() {
        let c = parse_config(None, &["preset=paper".into()]).unwrap();
        assert_eq!((c.encoder.latent_dim, c.quantizer.codebook_size, c.encoder.queries), (128, 7, 256));
        assert_eq!((c.encoder.layers, c.pretrain.gaps.max, c.policy.horizon), (12, 16, 16));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(None, &["encoder.latnet_dim=4".into()]).unwrap_err();
        assert!(err.to_string().contains("latnet_dim"), "{err}");
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(br#"{"latnet_dim": 3}"#).unwrap();
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("latnet_dim"), "{err}");
    }

    #[test]
    fn overrides_beat_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(br#"{"seed": 5, "encoder": {"latent_dim": 8}}"#).unwrap();
        let c = parse_config(Some(f.path()), &["seed=9".into()]).unwrap();
        assert_eq!((c.seed, c.encoder.latent_dim), (9, 8));
    }

    #[test]
    fn bad_value_names_the_path() {
        let err = parse_config(None, &["policy.horizon=many".into()]).unwrap_err();
        assert!(err.to_string().contains("policy.horizon"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn inconsistent_patch_size_is_rejected() {
        assert!(parse_config(None, &["encoder.patch_size=7".into()]).is_err());
    }

    #[test]
    fn serialised_config_round_trips() {
        let c = RunConfig::preset(Preset::Paper);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
