mod support;

use driftkit::autodiff::{Graph, Tensor};
use driftkit::policy::{
    draw_latents, executed_prefix, sample_hypotheses, ActionChunk, ChunkSpec, Generator,
    GeneratorParams, LatentSample, ModelConfig, ObservationHistory,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{golden, tiny_generator, tiny_spec};

fn probe_obs(spec: &ChunkSpec) -> ObservationHistory {
    let n = spec.obs_features();
    let data = (0..n).map(|k| (k as f64 * 0.41).sin()).collect();
    ObservationHistory::new(Tensor::new(vec![spec.obs_history, spec.obs_dim], data).unwrap())
        .unwrap()
}

/// `n` copies of `t` as an `[n, numel]` matrix.
fn rows(t: &Tensor, n: usize) -> Tensor {
    t.reshape(&[t.numel()])
        .unwrap()
        .broadcast_leading(&[n])
        .unwrap()
}

#[test]
fn zero_network_outputs_zero_chunk() {
    let spec = ChunkSpec::default();
    let gen = Generator::new(GeneratorParams::zeros(&spec, &ModelConfig::default()), spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let chunk = gen
        .generate(&probe_obs(&spec), &LatentSample::draw(8, &mut rng))
        .unwrap();
    assert!(chunk.flat().data().iter().all(|&x| x == 0.0));
}

#[test]
fn generate_matches_golden_chunk() {
    let gen = tiny_generator(7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let z = LatentSample::draw(3, &mut rng);
    let a = gen.generate(&probe_obs(gen.spec()), &z).unwrap();
    let b = gen.generate(&probe_obs(gen.spec()), &z).unwrap();
    assert_eq!(a, b);
    golden("generate_tiny", a.flat().data());
}

#[test]
fn latent_draws_match_golden_transcript() {
    let gen = tiny_generator(7);
    let obs = Tensor::zeros(&[2, gen.spec().obs_features()]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut g = Graph::new();
    let bound = gen.params.bind(&mut g, false);
    let (_, latents) = sample_hypotheses(&mut g, &gen, &bound, &obs, 4, &mut rng).unwrap();
    assert_eq!(latents.shape(), &[2, 4, 3]);
    golden("latents_g4_seed42", latents.data());
}

#[test]
fn single_hypothesis_equals_generate_per_row() {
    let gen = tiny_generator(3);
    let spec = *gen.spec();
    let rows: Vec<f64> = (0..3 * spec.obs_features())
        .map(|k| (k as f64 * 0.13).cos())
        .collect();
    let obs = Tensor::new(vec![3, spec.obs_features()], rows).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let bound = gen.params.bind(&mut g, false);
    let (batch, latents) = sample_hypotheses(&mut g, &gen, &bound, &obs, 1, &mut rng).unwrap();
    for i in 0..3 {
        let o = obs
            .slice(0, i, 1)
            .unwrap()
            .reshape(&[spec.obs_history, spec.obs_dim])
            .unwrap();
        let z = latents.slice(0, i, 1).unwrap().reshape(&[3]).unwrap();
        let chunk = gen
            .generate(&ObservationHistory::new(o).unwrap(), &LatentSample::new(z))
            .unwrap();
        assert_eq!(
            chunk.flat().data(),
            batch.detached.slice(0, i, 1).unwrap().data()
        );
    }
}

#[test]
fn identical_latents_give_identical_rows() {
    let gen = tiny_generator(4);
    let spec = *gen.spec();
    let obs = rows(&probe_obs(&spec).flat_row(), 2);
    let z = rows(&Tensor::from_vec(vec![0.3, -1.2, 0.8]), 2);
    let out = gen.generate_batch(&obs, &z).unwrap();
    assert_eq!(out.slice(0, 0, 1).unwrap(), out.slice(0, 1, 1).unwrap());
}

#[test]
fn batched_rows_do_not_depend_on_batch_size() {
    let gen = tiny_generator(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = draw_latents(5, gen.spec().obs_features(), &mut rng);
    let z = draw_latents(5, 3, &mut rng);
    let all = gen.generate_batch(&obs, &z).unwrap();
    for i in 0..5 {
        let one = gen
            .generate_batch(&obs.slice(0, i, 1).unwrap(), &z.slice(0, i, 1).unwrap())
            .unwrap();
        assert_eq!(one, all.slice(0, i, 1).unwrap());
    }
}

#[test]
fn executed_prefix_windows() {
    let chunk = |h: usize| {
        ActionChunk::new(
            Tensor::from_vec((0..2 * h).map(|k| k as f64).collect()),
            h,
            2,
        )
        .unwrap()
    };
    let whole = ChunkSpec {
        horizon: 5,
        action_dim: 2,
        obs_history: 1,
        exec_steps: 5,
        obs_dim: 1,
    };
    assert_eq!(
        executed_prefix(&chunk(5), &whole).unwrap(),
        chunk(5).steps()
    );
    // H=16, T_o=2, H_e=8: steps 2..9 counting from one
    let p = executed_prefix(&chunk(16), &ChunkSpec::default()).unwrap();
    assert_eq!(p.shape(), &[8, 2]);
    assert_eq!(p.data()[0], 2.0);
    assert_eq!(p.data()[15], 17.0);
    let last = ChunkSpec {
        horizon: 4,
        action_dim: 2,
        obs_history: 4,
        exec_steps: 1,
        obs_dim: 1,
    };
    assert_eq!(
        executed_prefix(&chunk(4), &last).unwrap().data(),
        &[6.0, 7.0]
    );
    let bad = ChunkSpec {
        exec_steps: 2,
        ..last
    };
    assert!(executed_prefix(&chunk(4), &bad).is_err());
}

#[test]
fn chunk_reshape_round_trips() {
    let c = ActionChunk::new(Tensor::from_vec((0..8).map(f64::from).collect()), 4, 2).unwrap();
    let back = ActionChunk::new(c.steps(), 4, 2).unwrap();
    assert_eq!(back, c);
}

#[test]
fn pushforward_mean_is_stable_across_latent_sets() {
    let gen = tiny_generator(11);
    let spec = *gen.spec();
    let n = 10_000;
    let obs = rows(&probe_obs(&spec).flat_row(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = gen
        .generate_batch(&obs, &draw_latents(n, 3, &mut rng))
        .unwrap();
    let b = gen
        .generate_batch(&obs, &draw_latents(n, 3, &mut rng))
        .unwrap();
    let d = spec.chunk_dim();
    let (ma, mb) = (a.mean_axis(0).unwrap(), b.mean_axis(0).unwrap());
    for k in 0..d {
        let var = |t: &Tensor, m: f64| {
            (0..n)
                .map(|i| (t.data()[i * d + k] - m).powi(2))
                .sum::<f64>()
                / (n - 1) as f64
        };
        let se = ((var(&a, ma.data()[k]) + var(&b, mb.data()[k])) / n as f64).sqrt();
        assert!(
            (ma.data()[k] - mb.data()[k]).abs() <= 3.0 * se + 1e-15,
            "coordinate {k}"
        );
    }
}

#[test]
fn one_forward_per_deployment_call() {
    let gen = tiny_generator(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obs = probe_obs(gen.spec());
    for k in 1..=10 {
        gen.generate(&obs, &LatentSample::draw(3, &mut rng))
            .unwrap();
        assert_eq!(gen.evaluations(), k);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let gen = tiny_generator(2);
    let (spec, _) = tiny_spec();
    let wrong = ObservationHistory::new(Tensor::zeros(&[1, spec.obs_dim])).unwrap();
    assert!(gen
        .generate(&wrong, &LatentSample::new(Tensor::zeros(&[3])))
        .is_err());
    assert!(Generator::new(gen.params.clone(), ChunkSpec::default()).is_err());
}
