mod oracle;
mod support;

use driftkit::actor::{
    actor_forward, actor_forward_graph, deploy_action, prefix_columns, prefix_entropy,
    prefix_log_prob, prefix_log_prob_graph, sample_action, sample_with_noise, ActorConfig,
    ActorHead, ActorVars, GaussianActorOutput,
};
use driftkit::autodiff::{Graph, Tensor};
use driftkit::policy::{draw_latents, ChunkSpec, LatentSample, ObservationHistory};
use oracle::{finite_diff, gaussian_logpdf, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{golden, tiny_generator, tiny_head, tiny_spec};

fn random_output(seed: u64, rows: usize) -> GaussianActorOutput {
    let (spec, _) = tiny_spec();
    let d = spec.chunk_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ls = (0..rows * d).map(|_| rng.random_range(-2.0..0.5)).collect();
    GaussianActorOutput {
        mean: Tensor::new(vec![rows, d], mean).unwrap(),
        log_std: Tensor::new(vec![rows, d], ls).unwrap(),
        spec,
    }
}

#[test]
fn zero_head_gives_unit_scale() {
    let gen = tiny_generator(1);
    let cfg = ActorConfig {
        init_log_std: 0.0,
        ..ActorConfig::default()
    };
    let head = ActorHead::new(gen.params.feature_dim(), gen.params.chunk_dim(), &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = draw_latents(3, gen.spec().obs_features(), &mut rng);
    let out = actor_forward(&gen, &head, &obs, &draw_latents(3, 3, &mut rng)).unwrap();
    assert!(out.log_std.data().iter().all(|&v| v == 0.0));
}

#[test]
fn huge_head_output_is_clipped() {
    let gen = tiny_generator(1);
    let mut head = ActorHead::new(
        gen.params.feature_dim(),
        gen.params.chunk_dim(),
        &ActorConfig::default(),
    );
    head.scale.bias = Tensor::full(&[gen.params.chunk_dim()], 1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = draw_latents(2, gen.spec().obs_features(), &mut rng);
    let out = actor_forward(&gen, &head, &obs, &draw_latents(2, 3, &mut rng)).unwrap();
    assert!(out.log_std.data().iter().all(|&v| v == head.log_std_max));
    head.scale.bias = Tensor::full(&[gen.params.chunk_dim()], -1e3);
    let out = actor_forward(&gen, &head, &obs, &draw_latents(2, 3, &mut rng)).unwrap();
    assert!(out.log_std.data().iter().all(|&v| v == head.log_std_min));
}

#[test]
fn actor_forward_matches_golden() {
    let gen = tiny_generator(21);
    let head = tiny_head(&gen, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let obs = draw_latents(2, gen.spec().obs_features(), &mut rng);
    let z = draw_latents(2, 3, &mut rng);
    let out = actor_forward(&gen, &head, &obs, &z).unwrap();
    let mut flat = out.mean.data().to_vec();
    flat.extend_from_slice(out.log_std.data());
    golden("actor_forward_tiny", &flat);
    assert_eq!(gen.evaluations(), 1);
}

#[test]
fn zero_noise_returns_mean_and_tiny_scale_stays_close() {
    let mut out = random_output(3, 2);
    let zero = Tensor::zeros(out.mean.shape());
    assert_eq!(sample_with_noise(&out, &zero).unwrap(), out.mean);
    out.log_std = Tensor::full(out.mean.shape(), -20.0);
    let sigma = (-20.0f64).exp();
    let eta = Tensor::new(
        out.mean.shape().to_vec(),
        (0..out.mean.numel()).map(|k| (k as f64).sin()).collect(),
    )
    .unwrap();
    let x = sample_with_noise(&out, &eta).unwrap();
    for (a, m) in x.data().iter().zip(out.mean.data()) {
        assert!((a - m).abs() <= 5.0 * sigma);
    }
}

#[test]
fn monte_carlo_scale_matches_sigma() {
    let one = random_output(4, 1);
    let n = 100_000;
    let d = one.spec.chunk_dim();
    let out = GaussianActorOutput {
        mean: one
            .mean
            .reshape(&[d])
            .unwrap()
            .broadcast_leading(&[n])
            .unwrap(),
        log_std: one
            .log_std
            .reshape(&[d])
            .unwrap()
            .broadcast_leading(&[n])
            .unwrap(),
        spec: one.spec,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, _) = sample_action(&out, &mut rng).unwrap();
    for k in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x.data()[i * d + k]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let sigma = one.log_std.data()[k].exp();
        assert!(
            (sd / sigma - 1.0).abs() < 0.02,
            "coordinate {k}: {sd} vs {sigma}"
        );
    }
}

#[test]
fn log_prob_matches_scalar_density_sum() {
    let out = random_output(6, 4);
    let spec = out.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..4 * spec.chunk_dim())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let x = Tensor::new(vec![4, spec.chunk_dim()], x).unwrap();
    let x_exec = prefix_columns(&x, &spec).unwrap();
    let lp = prefix_log_prob(&x_exec, &out).unwrap();
    let d = spec.chunk_dim();
    for i in 0..4 {
        let mut expect = 0.0;
        for h in spec.exec_range() {
            for m in 0..spec.action_dim {
                let k = i * d + h * spec.action_dim + m;
                expect +=
                    gaussian_logpdf(x.data()[k], out.mean.data()[k], out.log_std.data()[k].exp())
                        .unwrap();
            }
        }
        assert!((lp.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn log_prob_closed_forms() {
    let (spec, _) = tiny_spec();
    let d = spec.chunk_dim();
    let out = GaussianActorOutput {
        mean: Tensor::new(vec![1, d], (0..d).map(|k| k as f64 * 0.1).collect()).unwrap(),
        log_std: Tensor::zeros(&[1, d]),
        spec,
    };
    let k = (spec.exec_steps * spec.action_dim) as f64;
    let at_mean = prefix_columns(&out.mean, &spec).unwrap();
    let lp0 = prefix_log_prob(&at_mean, &out).unwrap().data()[0];
    assert!((lp0 + k / 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    let mut shifted = at_mean.clone();
    shifted.data_mut()[1] += 1.0;
    let lp1 = prefix_log_prob(&shifted, &out).unwrap().data()[0];
    assert!((lp1 - (lp0 - 0.5)).abs() < 1e-12);
}

#[test]
fn entropy_matches_independent_formula() {
    let out = random_output(8, 3);
    let spec = out.spec;
    let h = prefix_entropy(&out).unwrap();
    let d = spec.chunk_dim();
    for i in 0..3 {
        let mut expect = 0.0;
        for step in spec.exec_range() {
            for m in 0..spec.action_dim {
                let sigma = out.log_std.data()[i * d + step * spec.action_dim + m].exp();
                expect +=
                    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
            }
        }
        assert!((h.data()[i] - expect).abs() < 1e-12);
    }
    let unit = GaussianActorOutput {
        log_std: Tensor::zeros(out.log_std.shape()),
        ..out.clone()
    };
    let k = (spec.exec_steps * spec.action_dim) as f64;
    let h1 = prefix_entropy(&unit).unwrap().data()[0];
    assert!((h1 - k * 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    let mut doubled = unit.clone();
    let first = spec.exec_range().start * spec.action_dim;
    doubled.log_std.data_mut()[first] = 2f64.ln();
    assert!((prefix_entropy(&doubled).unwrap().data()[0] - h1 - 2f64.ln()).abs() < 1e-12);
}

fn log_prob_sum(
    mean: &Tensor,
    log_std: &Tensor,
    x_exec: &Tensor,
    spec: &ChunkSpec,
) -> (f64, Tensor, Tensor) {
    let mut g = Graph::new();
    let m = g.param(mean.clone());
    let s = g.param(log_std.clone());
    let x = g.constant(x_exec.clone());
    let lp = prefix_log_prob_graph(
        &mut g,
        x,
        &ActorVars {
            mean: m,
            log_std: s,
        },
        spec,
    )
    .unwrap();
    let total = g.sum(lp);
    let grads = g.backward(total).unwrap();
    (
        g.value(total).item().unwrap(),
        grads.get_or_zeros(m, mean),
        grads.get_or_zeros(s, log_std),
    )
}

#[test]
fn log_prob_gradients_match_finite_differences_and_respect_the_mask() {
    let out = random_output(9, 2);
    let spec = out.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<f64> = (0..2 * spec.exec_steps * spec.action_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x_exec = Tensor::new(vec![2, spec.exec_steps * spec.action_dim], x).unwrap();
    let (_, gm, gs) = log_prob_sum(&out.mean, &out.log_std, &x_exec, &spec);
    let shape = out.mean.shape().to_vec();
    let num_m = finite_diff(
        |v| {
            log_prob_sum(
                &Tensor::new(shape.clone(), v.to_vec()).unwrap(),
                &out.log_std,
                &x_exec,
                &spec,
            )
            .0
        },
        out.mean.data(),
        1e-5,
    );
    let num_s = finite_diff(
        |v| {
            log_prob_sum(
                &out.mean,
                &Tensor::new(shape.clone(), v.to_vec()).unwrap(),
                &x_exec,
                &spec,
            )
            .0
        },
        out.log_std.data(),
        1e-5,
    );
    let mask = spec.prefix_mask();
    let d = spec.chunk_dim();
    for k in 0..gm.numel() {
        assert!(rel_err(gm.data()[k], num_m[k], 1e-4) < 1e-5);
        assert!(rel_err(gs.data()[k], num_s[k], 1e-4) < 1e-5);
        if mask.data()[k % d] == 0.0 {
            assert_eq!(gm.data()[k], 0.0);
            assert_eq!(gs.data()[k], 0.0);
        }
    }
    // perturbing unexecuted coordinates leaves the value untouched
    let mut m2 = out.mean.clone();
    let mut s2 = out.log_std.clone();
    for k in 0..m2.numel() {
        if mask.data()[k % d] == 0.0 {
            m2.data_mut()[k] += 3.0;
            s2.data_mut()[k] -= 1.0;
        }
    }
    let a = log_prob_sum(&out.mean, &out.log_std, &x_exec, &spec).0;
    let b = log_prob_sum(&m2, &s2, &x_exec, &spec).0;
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn deployment_is_the_actor_mean_in_one_call() {
    let gen = tiny_generator(12);
    let head = tiny_head(&gen, 13);
    let spec = *gen.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let o = draw_latents(1, spec.obs_features(), &mut rng);
    let z = draw_latents(1, 3, &mut rng);
    let out = actor_forward(&gen, &head, &o, &z).unwrap();
    gen.reset_evaluations();
    let obs =
        ObservationHistory::new(o.reshape(&[spec.obs_history, spec.obs_dim]).unwrap()).unwrap();
    let chunk = deploy_action(&gen, &obs, &LatentSample::new(z.reshape(&[3]).unwrap())).unwrap();
    assert_eq!(gen.evaluations(), 1);
    assert_eq!(chunk.flat().data(), out.mean.data());
}

#[test]
fn graph_forward_counts_one_evaluation_and_clips() {
    let gen = tiny_generator(15);
    let mut head = tiny_head(&gen, 16);
    head.scale.bias = Tensor::full(&[gen.params.chunk_dim()], 50.0);
    let mut g = Graph::new();
    let bound = gen.params.bind(&mut g, true);
    let bh = head.bind(&mut g, true);
    let o = g.constant(Tensor::zeros(&[3, gen.spec().obs_features()]));
    let z = g.constant(Tensor::zeros(&[3, 3]));
    let vars = actor_forward_graph(&mut g, &gen, &bound, &head, &bh, o, z).unwrap();
    assert_eq!(gen.evaluations(), 1);
    assert!(g
        .value(vars.log_std)
        .data()
        .iter()
        .all(|&v| v == head.log_std_max));
    // the clip is saturated, so the head receives no gradient
    let l = g.sum(vars.log_std);
    let grads = g.backward(l).unwrap();
    assert!(grads
        .get_or_zeros(bh.bias, &head.scale.bias)
        .data()
        .iter()
        .all(|&v| v == 0.0));
}
