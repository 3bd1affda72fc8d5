//! Deployment-mode evaluation on the point-mass task.

use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor::deploy_action;
use crate::autodiff::Tensor;
use crate::env::{run_scripted, EnvConfig, PointMassEnv};
use crate::error::{Error, Result};
use crate::policy::{executed_prefix, ChunkSpec, Generator, LatentSample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub ret: f64,
    pub success: bool,
    pub micro_steps: usize,
    pub decisions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    /// Decisions whose generator call count was not exactly one.
    pub nfe_violations: usize,
    pub decisions: usize,
    pub wall_clock: Duration,
}

pub const EPISODES_HEADER: &str = "episode,return,success,micro_steps,decisions";

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn per_decision(&self) -> Duration {
        if self.decisions == 0 {
            Duration::ZERO
        } else {
            self.wall_clock / self.decisions as u32
        }
    }

    pub fn episode_rows(&self) -> Vec<String> {
        self.episodes
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{}",
                    e.episode, e.ret, e.success as u8, e.micro_steps, e.decisions
                )
            })
            .collect()
    }
}

/// Who picks the actions.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Generator(&'a Generator),
    Scripted,
}

/// Task seeds for `episodes` episodes under `seed`.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.next_u64()).collect()
}

/// Runs `episodes` episodes with the deterministic deployment path. Latents
/// come from stream 1 of `seed`, tasks from stream 0.
pub fn evaluate(
    policy: Policy<'_>,
    env: &EnvConfig,
    spec: &ChunkSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    latent_rng.set_stream(1);
    if let Policy::Generator(g) = policy {
        if g.spec() != spec {
            return Err(Error::Checkpoint(format!(
                "policy chunk spec {:?} differs from the evaluation spec {spec:?}",
                g.spec()
            )));
        }
    }
    let start = Instant::now();
    for (episode, task) in episode_seeds(seed, episodes).into_iter().enumerate() {
        let mut e = PointMassEnv::new(*env, spec.obs_history)?;
        let mut obs = e.reset(task);
        let mut ret = 0.0;
        let mut decisions = 0;
        let success = match policy {
            Policy::Scripted => {
                let (ok, _) = run_scripted(&mut e, spec.exec_steps)?;
                decisions = e.steps().div_ceil(spec.exec_steps);
                ret = if ok && env.reward == crate::env::RewardMode::Sparse {
                    1.0
                } else {
                    0.0
                };
                ok
            }
            Policy::Generator(g) => {
                let mut ok = false;
                while !e.is_done() {
                    let z = LatentSample::draw(g.params.latent_dim(), &mut latent_rng);
                    let before = g.evaluations();
                    let chunk = deploy_action(g, &obs, &z)?;
                    if g.evaluations() - before != 1 {
                        report.nfe_violations += 1;
                    }
                    let prefix: Tensor = executed_prefix(&chunk, spec)?;
                    let out = e.step(&prefix)?;
                    ret += out.reward;
                    decisions += 1;
                    ok = out.success;
                    obs = out.obs;
                }
                ok
            }
        };
        report.decisions += decisions;
        report.episodes.push(EpisodeResult {
            episode,
            ret,
            success,
            micro_steps: e.steps(),
            decisions,
        });
    }
    report.wall_clock = start.elapsed();
    Ok(report)
}
