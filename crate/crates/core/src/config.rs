//! Pipeline configuration: one TOML document, stage fingerprints and seed derivation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featmap::{CellSize, FeatureConfig};
use crate::hierarchy::HierarchyParams;
use crate::lastdpm::InferenceMode;
use crate::learn::{BowConfig, ModelConfig, SgdConfig, TrainConfig};
use crate::synth::{CorpusConfig, SceneConfig};
use crate::trajkit::{KMeansConfig, KMeansInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub k: usize,
    /// Descriptors sampled from the training videos.
    pub samples: usize,
    pub kmeans: KMeansConfig,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            k: 32,
            samples: 10_000,
            kmeans: KMeansConfig {
                init: KMeansInit::PlusPlus,
                max_iter: 100,
                restarts: 3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub theta: f64,
    /// Overlap for the headline ROC curve.
    pub overlap: f64,
    pub overlaps: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Detections kept per video and model after suppression.
    pub max_detections: usize,
    pub mode: InferenceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            overlap: 0.2,
            overlaps: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            thetas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            max_detections: 10,
            mode: InferenceMode::TwoStage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub workers: usize,
    pub synth: SceneConfig,
    pub corpus: CorpusConfig,
    pub codebook: CodebookConfig,
    pub hierarchy: HierarchyParams,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bow: BowConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            synth: SceneConfig {
                width: 160,
                height: 120,
                frames: 40,
                ..Default::default()
            },
            corpus: CorpusConfig::default(),
            codebook: CodebookConfig::default(),
            hierarchy: HierarchyParams {
                min_support: 10,
                ..Default::default()
            },
            features: FeatureConfig {
                grain_cell: CellSize::new(16.0, 16.0, 4),
                octaves: 1,
                levels_per_octave: 2,
                ..Default::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                sgd: SgdConfig {
                    c: 1.0,
                    eta0: 0.05,
                    lambda: 1e-4,
                    epochs: 30,
                    divergence_bound: 1e6,
                },
                rounds: 4,
                cache_limit: 200,
                deform_scale: 4.0,
                ..Default::default()
            },
            bow: BowConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Pipeline stages, each fingerprinted by the config sections it depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Codebook,
    Hierarchy,
    Bow,
    Lastdpm,
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn digest16(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `section.key=value` overrides; values parse as TOML, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::ConfigInvalid(format!("{key}: {p} is not a section")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*p) {
                        return Err(Error::ConfigInvalid(format!("unknown config key {key}")));
                    }
                    table.insert(p.to_string(), value.clone());
                    break;
                }
                node = table
                    .get_mut(*p)
                    .ok_or_else(|| Error::ConfigInvalid(format!("unknown config section in {key}")))?;
            }
        }
        let cfg: Config = doc.try_into().map_err(|e: toml::de::Error| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.hierarchy.validate()?;
        if self.codebook.k == 0 || self.codebook.samples == 0 {
            return Err(Error::ConfigInvalid("codebook k and samples must be positive".into()));
        }
        let c = self.features.grain_cell;
        if !(c.x > 0.0 && c.y > 0.0) || c.t == 0 {
            return Err(Error::ConfigInvalid("feature cells must be positive".into()));
        }
        if !(self.features.clip > 0.0) {
            return Err(Error::ConfigInvalid("clip must be positive".into()));
        }
        if self.train.cache_limit == 0 {
            return Err(Error::ConfigInvalid("cache limit must be at least 1".into()));
        }
        Ok(())
    }

    /// Fingerprint of every section `stage` depends on (16 hex digits).
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![json(&self.seed), json(&self.synth), json(&self.corpus)];
        if stage != Stage::Corpus {
            parts.push(json(&self.codebook));
        }
        if matches!(stage, Stage::Hierarchy | Stage::Bow | Stage::Lastdpm) {
            parts.push(json(&self.hierarchy));
        }
        match stage {
            Stage::Bow => parts.push(json(&self.bow)),
            Stage::Lastdpm => {
                parts.push(json(&self.features));
                parts.push(json(&self.model));
                parts.push(json(&self.train));
            }
            _ => {}
        }
        digest16(serde_json::Value::Array(parts).to_string().as_bytes())
    }

    /// Independent seed for a named use of the top-level seed.
    pub fn derive_seed(&self, tag: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(tag.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
    }
}

/// 16 hex digits as the u64 stored in binary headers.
pub fn hash_to_u64(hash: &str) -> Result<u64> {
    u64::from_str_radix(hash, 16).map_err(|_| Error::format(format!("bad config hash {hash:?}")))
}

pub fn hash_from_u64(v: u64) -> String {
    format!("{v:016x}")
}
