mod support;

use driftkit::autodiff::Tensor;
use driftkit::drift::DriftConfig;
use driftkit::env::{synth_multimodal, EnvConfig, ImitationDataset, SynthConfig};
use driftkit::error::Error;
use driftkit::optim::{ema_decay, ema_update, global_norm, grad_clip};
use driftkit::policy::{ChunkSpec, Generator, GeneratorParams, ModelConfig};
use driftkit::trainer::{train, train_with_dump, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{pretrain, toy_dataset};

fn small() -> (ImitationDataset, Generator) {
    let spec = ChunkSpec::default();
    let ds = synth_multimodal(
        &SynthConfig {
            conditions: 8,
            ..SynthConfig::default()
        },
        &EnvConfig::default(),
        &spec,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ModelConfig {
        hidden: 16,
        ..ModelConfig::default()
    };
    (
        ds,
        Generator::new(GeneratorParams::init(&spec, &model, &mut rng), spec).unwrap(),
    )
}

#[test]
fn ema_approaches_constant_params_monotonically() {
    let target = Tensor::from_vec((0..12).map(|k| (k as f64).cos()).collect());
    let mut shadow = vec![Tensor::zeros(&[12])];
    let mut last = f64::INFINITY;
    for step in 0..100 {
        ema_update(&mut shadow, &[&target], ema_decay(step, 0.9999, 0.75)).unwrap();
        let gap = global_norm(&[shadow[0].sub(&target).unwrap()]);
        assert!(gap < last, "step {step}");
        last = gap;
    }
}

#[test]
fn warmup_lr_is_exactly_linear_in_the_log() {
    let (ds, gen) = small();
    let cfg = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(20),
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (_, log) = train(&ds, gen, &DriftConfig::default(), &cfg, |_, _| Ok(())).unwrap();
    for m in &log {
        assert_eq!(m.lr, 1e-4 * m.step as f64 / 500.0);
        assert!(m.loss.is_finite() && m.grad_norm.is_finite());
    }
}

#[test]
fn toy_training_lowers_the_loss() {
    let ds = toy_dataset(42);
    let (_, losses) = pretrain(&ds, &DriftConfig::default(), 42, 300);
    assert_eq!(losses.len(), 300);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&losses[..20]), mean(&losses[280..]));
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn exploding_parameters_abort_with_a_dump() {
    let (ds, gen) = small();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(50),
        batch_size: 4,
        lr: 1e200,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let err = train_with_dump(
        &ds,
        gen,
        &DriftConfig::default(),
        &cfg,
        Some(dir.path().into()),
        |_, _| Ok(()),
    )
    .unwrap_err();
    match err {
        Error::NonFinite { dump, .. } => {
            let path = dump.expect("dump written");
            let text = std::fs::read_to_string(path).unwrap();
            assert!(text.contains("indices"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_or_mismatched_data_is_rejected() {
    let (mut ds, gen) = small();
    ds.records.clear();
    assert!(train(
        &ds,
        gen,
        &DriftConfig::default(),
        &TrainConfig::default(),
        |_, _| Ok(())
    )
    .is_err());
    let (ds, _) = small();
    let spec = ChunkSpec {
        horizon: 12,
        ..ChunkSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wrong = Generator::new(
        GeneratorParams::init(&spec, &ModelConfig::default(), &mut rng),
        spec,
    )
    .unwrap();
    assert!(train(
        &ds,
        wrong,
        &DriftConfig::default(),
        &TrainConfig::default(),
        |_, _| Ok(())
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn clipped_norm_never_exceeds_the_cap(
        a in prop::collection::vec(-50.0f64..50.0, 1..20),
        b in prop::collection::vec(-50.0f64..50.0, 1..20),
        cap in 1e-3f64..10.0,
    ) {
        let mut g = vec![Tensor::from_vec(a.clone()), Tensor::from_vec(b.clone())];
        let before = grad_clip(&mut g, cap).unwrap();
        prop_assert!(global_norm(&g) <= cap + 1e-12);
        let scale = if before > cap { cap / before } else { 1.0 };
        for (x, y) in a.iter().chain(&b).zip(g.iter().flat_map(|t| t.data())) {
            prop_assert!((x * scale - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
