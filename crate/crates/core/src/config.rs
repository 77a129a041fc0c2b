//! Run configuration: presets, layered overrides and per-field provenance.
//!
//! A configuration is resolved in layers: a preset supplies every field, then
//! a JSON file, environment defaults and command-line flags override
//! individual dotted keys such as `train.batch_size`. Each leaf remembers
//! which layer set it last.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gw::GwConfig;
use crate::losses::LossWeights;
use crate::metrics::EvalOptions;
use crate::model::{ModelConfig, TrainConfig};
use crate::tensor::{AdamConfig, LrSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset `{0}` (desk, paper)")]
    Preset(String),
    #[error("config must be a JSON object")]
    NotObject,
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(#[from] serde_json::Error),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(ConfigError::Preset(s.into())),
        }
    }
}

/// Where a configuration value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

/// Training data: a manifest when given, otherwise synthetic pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_frames: usize,
    /// Fraction of synthetic dance beats placed on music beats.
    pub synth_alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub music_to_dance: ModelConfig,
    pub dance_to_music: ModelConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig {
                preset: p,
                seed: 0,
                steps: 2000,
                checkpoint_every: 500,
                out_dir: PathBuf::from("runs/desk"),
                data: DataConfig { manifest: None, synth_train: 24, synth_test: 6, synth_frames: 96, synth_alignment: 0.9 },
                train: TrainConfig::default(),
                music_to_dance: ModelConfig::desk(),
                dance_to_music: ModelConfig::desk(),
                eval: EvalOptions { chunk: 24, generations: 5, seed: 0 },
            },
            Preset::Paper => RunConfig {
                preset: p,
                seed: 0,
                steps: 60_000,
                checkpoint_every: 5_000,
                out_dir: PathBuf::from("runs/paper"),
                data: DataConfig { manifest: None, synth_train: 256, synth_test: 32, synth_frames: 300, synth_alignment: 0.9 },
                train: TrainConfig {
                    t: 75,
                    batch_size: 16,
                    weights: LossWeights::default(),
                    adam: AdamConfig { schedule: LrSchedule::paper(), ..AdamConfig::default() },
                    gw: GwConfig::default(),
                    ..TrainConfig::default()
                },
                music_to_dance: ModelConfig { d_model: 512, heads: 8, layers: 6, d_ff: 2048 },
                dance_to_music: ModelConfig { d_model: 256, heads: 8, layers: 6, d_ff: 1024 },
                eval: EvalOptions { chunk: 75, generations: 5, seed: 0 },
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A configuration together with the provenance of every leaf key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

/// Layered builder for [`Resolved`].
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    value: Value,
    provenance: BTreeMap<String, Source>,
}

impl ConfigBuilder {
    pub fn new(preset: Preset) -> Self {
        let value = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        let mut provenance = BTreeMap::new();
        record_leaves(&value, "", Source::Default, &mut provenance);
        ConfigBuilder { value, provenance }
    }

    /// Merge a JSON object. Objects merge key by key; anything else replaces.
    pub fn merge(mut self, overlay: &Value, source: Source) -> Result<Self, ConfigError> {
        let obj = overlay.as_object().ok_or(ConfigError::NotObject)?;
        merge_into(self.value.as_object_mut().expect("object"), obj, "", source, &mut self.provenance)?;
        Ok(self)
    }

    pub fn merge_file(self, path: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let path = path.into();
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        let v: Value = serde_json::from_str(&text)?;
        self.merge(&v, Source::File)
    }

    /// Set one dotted key.
    pub fn set(self, key: &str, v: Value, source: Source) -> Result<Self, ConfigError> {
        let mut overlay = v;
        for part in key.rsplit('.') {
            let mut m = Map::new();
            m.insert(part.to_owned(), overlay);
            overlay = Value::Object(m);
        }
        self.merge(&overlay, source)
    }

    pub fn build(self) -> Result<Resolved, ConfigError> {
        let config: RunConfig = serde_json::from_value(self.value)?;
        Ok(Resolved { config, provenance: self.provenance })
    }
}

fn record_leaves(v: &Value, prefix: &str, source: Source, out: &mut BTreeMap<String, Source>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                record_leaves(child, &join(prefix, k), source, out);
            }
        }
        _ => {
            out.insert(prefix.to_owned(), source);
        }
    }
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_owned()
    } else {
        format!("{prefix}.{k}")
    }
}

fn merge_into(
    base: &mut Map<String, Value>,
    overlay: &Map<String, Value>,
    prefix: &str,
    source: Source,
    prov: &mut BTreeMap<String, Source>,
) -> Result<(), ConfigError> {
    for (k, v) in overlay {
        let key = join(prefix, k);
        let slot = base.get_mut(k).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        match (slot, v) {
            (Value::Object(b), Value::Object(o)) if !b.is_empty() => merge_into(b, o, &key, source, prov)?,
            (slot, v) => {
                *slot = v.clone();
                prov.retain(|p, _| !(p == &key || p.starts_with(&format!("{key}."))));
                record_leaves(v, &key, source, prov);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = RunConfig::preset(p);
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
            c.train.validate().unwrap();
            c.music_to_dance.validate().unwrap();
        }
    }

    #[test]
    fn provenance_tracks_layers() {
        let r = ConfigBuilder::new(Preset::Desk)
            .merge(&json!({"train": {"batch_size": 8}, "seed": 3}), Source::File)
            .unwrap()
            .set("seed", json!(9), Source::Flag)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(r.config.seed, 9);
        assert_eq!(r.config.train.batch_size, 8);
        assert_eq!(r.provenance["seed"], Source::Flag);
        assert_eq!(r.provenance["train.batch_size"], Source::File);
        assert_eq!(r.provenance["train.t"], Source::Default);
        let back: Resolved = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ConfigBuilder::new(Preset::Desk).merge(&json!({"trian": {}}), Source::File).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey(k) if k == "trian"));
        assert!(ConfigBuilder::new(Preset::Desk).set("data.manifest", json!("x.json"), Source::Flag).is_ok());
    }
}
