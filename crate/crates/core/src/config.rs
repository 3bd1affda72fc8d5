//! Run configuration as a flat JSON object with dotted keys, e.g.
//! `{"seed": 42, "train.lr": 0.001, "drift.hypotheses": 4}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::actor::ActorConfig;
use crate::dbpo::PPOConfig;
use crate::drift::DriftConfig;
use crate::env::{EnvConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::policy::{ChunkSpec, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Latents per condition for mode coverage.
    pub coverage_samples: usize,
    /// Dataset CSV used for mode coverage, if any.
    pub dataset: Option<PathBuf>,
    /// Run the scripted controller instead of the checkpoint.
    pub scripted: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            coverage_samples: 64,
            dataset: None,
            scripted: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset CSV; its metadata sits next to it as `.json`.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint to evaluate or fine-tune.
    pub checkpoint: Option<PathBuf>,
    pub chunk: ChunkSpec,
    pub model: ModelConfig,
    pub drift: DriftConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub env: EnvConfig,
    pub actor: ActorConfig,
    pub ppo: PPOConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses a flat dotted-key document. Unknown keys are errors.
    pub fn from_flat_json(text: &str) -> Result<Self> {
        let flat: Map<String, Value> = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config is not a JSON object: {e}")))?;
        let mut nested = Map::new();
        for (key, value) in flat {
            match key.split_once('.') {
                None => {
                    if nested.contains_key(&key) {
                        return Err(Error::config(format!("key {key:?} clashes with a section")));
                    }
                    nested.insert(key, value);
                }
                Some((section, field)) => {
                    if field.is_empty() || section.is_empty() {
                        return Err(Error::config(format!("malformed key {key:?}")));
                    }
                    let entry = nested
                        .entry(section.to_string())
                        .or_insert_with(|| Value::Object(Map::new()));
                    match entry {
                        Value::Object(m) => {
                            m.insert(field.to_string(), value);
                        }
                        _ => {
                            return Err(Error::config(format!(
                                "key {key:?} clashes with top-level {section:?}"
                            )))
                        }
                    }
                }
            }
        }
        let mut cfg: RunConfig = serde_json::from_value(Value::Object(nested))
            .map_err(|e| Error::config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat_json(&text)
    }

    /// Propagates the run seed into the sections that consume it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Fully resolved configuration as a flat dotted-key document.
    pub fn to_flat_json(&self) -> Result<String> {
        let nested = serde_json::to_value(self)?;
        let mut flat = Map::new();
        if let Value::Object(sections) = nested {
            for (name, v) in sections {
                match v {
                    Value::Object(fields) => {
                        for (f, fv) in fields {
                            flat.insert(format!("{name}.{f}"), fv);
                        }
                    }
                    other => {
                        flat.insert(name, other);
                    }
                }
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(flat))?;
        text.push('\n');
        Ok(text)
    }

    pub fn validate(&self) -> Result<()> {
        self.chunk.validate()?;
        self.model.validate()?;
        self.drift.validate()?;
        self.train.validate()?;
        self.env.validate()?;
        self.actor.validate()?;
        self.ppo.validate()?;
        self.synth.validate()
    }
}
