//! JSON checkpoints: chunk geometry, parameters, optimizer and rng state.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::ActorHead;
use crate::drift::DriftConfig;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::policy::{ChunkSpec, Generator, GeneratorParams, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Enough to rebuild a `ChaCha8Rng` at the same position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string; it does not fit in a JSON double.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ChunkSpec,
    pub model: ModelConfig,
    pub drift: DriftConfig,
    /// Optimizer steps (Stage 1) or PPO iterations (Stage 2) completed.
    pub step: u64,
    /// Live generator weights.
    pub params: GeneratorParams,
    /// EMA shadow; what evaluation and fine-tuning start from.
    pub ema: GeneratorParams,
    pub optimizer: Option<Adam>,
    pub rng: Option<RngState>,
    pub actor: Option<ActorHead>,
    pub critic: Option<Mlp>,
}

impl Checkpoint {
    pub fn new(
        spec: ChunkSpec,
        model: ModelConfig,
        drift: DriftConfig,
        params: GeneratorParams,
        ema: GeneratorParams,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            spec,
            model,
            drift,
            step: 0,
            params,
            ema,
            optimizer: None,
            rng: None,
            actor: None,
            critic: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not {FORMAT_VERSION}",
                self.format_version
            )));
        }
        self.spec.validate()?;
        self.model.validate()?;
        let expect = GeneratorParams::zeros(&self.spec, &self.model);
        for (name, p) in [("params", &self.params), ("ema", &self.ema)] {
            if !same_shapes(p, &expect) {
                return Err(Error::Checkpoint(format!(
                    "{name} shapes do not match the chunk spec and model"
                )));
            }
        }
        if let Some(head) = &self.actor {
            if head.scale.inputs() != self.model.hidden
                || head.scale.outputs() != self.spec.chunk_dim()
            {
                return Err(Error::Checkpoint(
                    "actor head does not fit the generator".into(),
                ));
            }
        }
        Ok(())
    }

    /// Generator over the EMA weights.
    pub fn eval_generator(&self) -> Result<Generator> {
        Generator::new(self.ema.clone(), self.spec)
    }
}

fn same_shapes(a: &GeneratorParams, b: &GeneratorParams) -> bool {
    use crate::nn::Parameters;
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.shape() == y.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(3);
        for _ in 0..7 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        assert_eq!(back.next_u64(), rng.next_u64());
    }

    #[test]
    fn round_trip_and_version_check() {
        let spec = ChunkSpec::default();
        let model = ModelConfig {
            hidden: 4,
            ..ModelConfig::default()
        };
        let p = GeneratorParams::zeros(&spec, &model);
        let ck = Checkpoint::new(spec, model, DriftConfig::default(), p.clone(), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let mut bad = ck.clone();
        bad.format_version = 99;
        bad.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
