//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use driftkit::actor::{ActorConfig, ActorHead};
use driftkit::policy::{ChunkSpec, Generator, GeneratorParams, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compares `values` with the committed file `tests/golden/<name>.json`.
/// With `DRIFTKIT_BLESS=1` the file is rewritten instead.
pub fn golden(name: &str, values: &[f64]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.json"));
    if std::env::var("DRIFTKIT_BLESS").is_ok_and(|v| v == "1") {
        std::fs::write(&path, serde_json::to_string_pretty(values).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden file {}: {e}", path.display()));
    let expect: Vec<f64> = serde_json::from_str(&text).unwrap();
    assert_eq!(expect.len(), values.len(), "{name}: length");
    for (k, (e, v)) in expect.iter().zip(values).enumerate() {
        assert_eq!(e.to_bits(), v.to_bits(), "{name}[{k}]: {e} vs {v}");
    }
}

pub fn tiny_spec() -> (ChunkSpec, ModelConfig) {
    (
        ChunkSpec {
            horizon: 4,
            action_dim: 2,
            obs_history: 2,
            exec_steps: 2,
            obs_dim: 3,
        },
        ModelConfig {
            latent_dim: 3,
            hidden: 5,
            tau: 0,
        },
    )
}

/// Seeded generator on the tiny spec.
pub fn tiny_generator(seed: u64) -> Generator {
    let (spec, model) = tiny_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Generator::new(GeneratorParams::init(&spec, &model, &mut rng), spec).unwrap()
}

/// Scale head with seeded non-zero weights so log-scales vary by row.
pub fn tiny_head(gen: &Generator, seed: u64) -> ActorHead {
    let mut head = ActorHead::new(
        gen.params.feature_dim(),
        gen.params.chunk_dim(),
        &ActorConfig::default(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = driftkit::nn::Linear::init(head.scale.inputs(), head.scale.outputs(), &mut rng);
    head.scale.weight = w.weight;
    head
}

/// Two-mode demonstrations on the default chunk spec.
pub fn toy_dataset(seed: u64) -> driftkit::env::ImitationDataset {
    let synth = driftkit::env::SynthConfig {
        seed,
        ..Default::default()
    };
    driftkit::env::synth_multimodal(&synth, &Default::default(), &ChunkSpec::default()).unwrap()
}

/// Stage-1 recipe used by the behavioural tests: lr 1e-3 with a 50-step
/// warmup, otherwise the defaults. Returns the EMA generator and the
/// per-step losses.
pub fn pretrain(
    dataset: &driftkit::env::ImitationDataset,
    drift: &driftkit::drift::DriftConfig,
    seed: u64,
    steps: u64,
) -> (Generator, Vec<f64>) {
    use driftkit::trainer::{train, TrainConfig};
    let spec = *dataset.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::new(
        GeneratorParams::init(&spec, &ModelConfig::default(), &mut rng),
        spec,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(steps),
        lr: 1e-3,
        warmup_steps: 50,
        seed,
        ..TrainConfig::default()
    };
    let (trainer, metrics) = train(dataset, gen, drift, &cfg, |_, _| Ok(())).unwrap();
    (
        trainer.ema_generator(),
        metrics.iter().map(|m| m.loss).collect(),
    )
}
