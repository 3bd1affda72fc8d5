//! Stage-2 fine-tuning: on-policy rollouts with stored latents, GAE, the
//! clipped surrogate on the latent-conditional ratio, a value head, a prefix
//! entropy bonus and an anchor to the frozen pretrained generator.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::actor::{
    actor_forward, actor_forward_graph, prefix_columns, prefix_entropy_graph, prefix_log_prob,
    prefix_log_prob_graph, sample_action, ActorHead,
};
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::env::{EnvConfig, PointMassEnv};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, BoundMlp, Mlp, Parameters};
use crate::optim::{grad_clip, Adam, AdamConfig};
use crate::policy::{draw_latents, Generator, GeneratorParams, ObservationHistory};

/// Largest log-ratio magnitude passed to `exp`.
pub const LOG_RATIO_CLAMP: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub anchor_coef: f64,
    /// Iterations over which the anchor weight falls linearly to zero;
    /// `None` keeps it constant.
    pub anchor_decay_iters: Option<usize>,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub num_envs: usize,
    /// Control decisions per environment per iteration.
    pub rollout_steps: usize,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub max_grad_norm: f64,
    pub iterations: usize,
    pub critic_hidden: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            anchor_coef: 1.0,
            anchor_decay_iters: None,
            gamma: 0.99,
            gae_lambda: 0.95,
            num_envs: 32,
            rollout_steps: 16,
            update_epochs: 4,
            minibatch_size: 128,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            max_grad_norm: 1.0,
            iterations: 30,
            critic_hidden: 64,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("ppo.clip_eps must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("ppo.gamma must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("ppo.gae_lambda must lie in [0, 1]"));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0 && self.anchor_coef >= 0.0) {
            return Err(Error::config("ppo loss weights must be >= 0"));
        }
        if self.num_envs == 0 || self.minibatch_size == 0 || self.critic_hidden == 0 {
            return Err(Error::config(
                "ppo.num_envs, minibatch_size and critic_hidden must be >= 1",
            ));
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::config(
                "ppo learning rates must be >= 0 and max_grad_norm > 0",
            ));
        }
        Ok(())
    }

    /// Anchor weight in force at `iteration` (0-based).
    pub fn anchor_at(&self, iteration: usize) -> f64 {
        match self.anchor_decay_iters {
            Some(n) if n > 0 => self.anchor_coef * (1.0 - iteration as f64 / n as f64).max(0.0),
            Some(_) => 0.0,
            None => self.anchor_coef,
        }
    }
}

/// Frozen copy of the pretrained generator.
#[derive(Clone, Debug)]
pub struct AnchorSnapshot {
    generator: Generator,
}

impl AnchorSnapshot {
    pub fn new(generator: &Generator) -> Self {
        Self {
            generator: generator.clone(),
        }
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.generator.params
    }

    /// `[N, D]` frozen means for the given rows.
    pub fn means(&self, obs: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.generator.generate_batch(obs, z)
    }
}

/// Value network over the flattened observation history.
pub fn critic_init<R: Rng + ?Sized>(obs_features: usize, hidden: usize, rng: &mut R) -> Mlp {
    Mlp::init(&[obs_features, hidden, 1], rng)
}

/// `[N]` values for `[N, F]` observations.
pub fn critic_values(critic: &Mlp, obs: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = critic.bind(&mut graph, false);
    let o = graph.constant(obs.clone());
    let v = bound.forward(&mut graph, o)?;
    Ok(graph.value(v).reshape(&[obs.shape()[0]])?)
}

/// Transitions in time-major order: index `t * num_envs + e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    /// `[T * E, T_o * d_o]`
    pub obs: Vec<Tensor>,
    /// `[T * E, C]`, reused verbatim in every update epoch.
    pub latents: Vec<Tensor>,
    /// Executed prefixes as sampled, `[T * E, H_e * d_a]`.
    pub actions: Vec<Tensor>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Bootstrap value per environment after the last step.
    pub last_values: Vec<f64>,
    /// Undiscounted returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn stack(rows: &[Tensor], idx: &[usize]) -> Result<Tensor> {
        let width = rows[idx[0]].numel();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(rows[i].data());
        }
        Ok(Tensor::new(vec![idx.len(), width], data)?)
    }

    /// Minibatch at `idx` with advantages taken from `advantages`.
    pub fn minibatch(&self, idx: &[usize], advantages: &[f64]) -> Result<Minibatch> {
        Ok(Minibatch {
            obs: Self::stack(&self.obs, idx)?,
            latents: Self::stack(&self.latents, idx)?,
            actions: Self::stack(&self.actions, idx)?,
            old_log_probs: Tensor::from_vec(idx.iter().map(|&i| self.log_probs[i]).collect()),
            advantages: Tensor::from_vec(idx.iter().map(|&i| advantages[i]).collect()),
            returns: Tensor::from_vec(idx.iter().map(|&i| self.returns[i]).collect()),
        })
    }
}

/// One PPO minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub obs: Tensor,
    pub latents: Tensor,
    pub actions: Tensor,
    pub old_log_probs: Tensor,
    pub advantages: Tensor,
    pub returns: Tensor,
}

/// Advantages and returns for one stream of transitions:
/// `A_t = sum_k (gamma lambda)^k delta_{t+k}`, `R_t = A_t + V_t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Fills `advantages` and `returns` per environment stream.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let (e_n, t_n) = (buffer.num_envs, buffer.steps);
    buffer.advantages = vec![0.0; t_n * e_n];
    buffer.returns = vec![0.0; t_n * e_n];
    for e in 0..e_n {
        let idx: Vec<usize> = (0..t_n).map(|t| t * e_n + e).collect();
        let r: Vec<f64> = idx.iter().map(|&i| buffer.rewards[i]).collect();
        let v: Vec<f64> = idx.iter().map(|&i| buffer.values[i]).collect();
        let d: Vec<bool> = idx.iter().map(|&i| buffer.dones[i]).collect();
        let (a, ret) = gae(&r, &v, &d, buffer.last_values[e], gamma, lambda);
        for (k, &i) in idx.iter().enumerate() {
            buffer.advantages[i] = a[k];
            buffer.returns[i] = ret[k];
        }
    }
}

/// `exp(new - old)` with the difference clamped to `+-40`.
pub fn ppo_ratio(new_log_prob: f64, old_log_prob: f64) -> f64 {
    (new_log_prob - old_log_prob)
        .clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
        .exp()
}

/// Mean of `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], eps: f64) -> f64 {
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum();
    total / ratios.len() as f64
}

/// Scales to zero mean, unit standard deviation; constant input becomes zeros.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return Vec::new();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Environments that persist across iterations.
#[derive(Clone, Debug)]
pub struct Collector {
    pub envs: Vec<PointMassEnv>,
    obs: Vec<ObservationHistory>,
    running_returns: Vec<f64>,
}

impl Collector {
    pub fn new<R: RngCore + ?Sized>(
        env: &EnvConfig,
        obs_history: usize,
        num_envs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut envs = Vec::with_capacity(num_envs);
        let mut obs = Vec::with_capacity(num_envs);
        for _ in 0..num_envs {
            let mut e = PointMassEnv::new(*env, obs_history)?;
            obs.push(e.reset(rng.next_u64()));
            envs.push(e);
        }
        Ok(Self {
            envs,
            obs,
            running_returns: vec![0.0; num_envs],
        })
    }

    fn obs_rows(&self) -> Result<Tensor> {
        let rows: Vec<Tensor> = self.obs.iter().map(|o| o.flat_row()).collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    /// `steps` decisions in every environment. One generator evaluation per
    /// decision covers all environments.
    pub fn collect<R: RngCore + ?Sized>(
        &mut self,
        generator: &Generator,
        head: &ActorHead,
        critic: &Mlp,
        steps: usize,
        rng: &mut R,
    ) -> Result<RolloutBuffer> {
        let e_n = self.envs.len();
        let spec = *generator.spec();
        let mut buf = RolloutBuffer {
            num_envs: e_n,
            steps,
            ..RolloutBuffer::default()
        };
        for _ in 0..steps {
            let obs = self.obs_rows()?;
            let z = draw_latents(e_n, generator.params.latent_dim(), rng);
            let out = actor_forward(generator, head, &obs, &z)?;
            let (x, _) = sample_action(&out, rng)?;
            let x_exec = prefix_columns(&x, &spec)?;
            let log_probs = prefix_log_prob(&x_exec, &out)?;
            let values = critic_values(critic, &obs)?;
            for e in 0..e_n {
                let prefix = x_exec.slice(0, e, 1)?;
                let step =
                    self.envs[e].step(&prefix.reshape(&[spec.exec_steps, spec.action_dim])?)?;
                buf.obs
                    .push(obs.slice(0, e, 1)?.reshape(&[obs.shape()[1]])?);
                buf.latents
                    .push(z.slice(0, e, 1)?.reshape(&[z.shape()[1]])?);
                buf.actions.push(prefix.reshape(&[prefix.numel()])?);
                buf.log_probs.push(log_probs.data()[e]);
                buf.values.push(values.data()[e]);
                buf.rewards.push(step.reward);
                buf.dones.push(step.done);
                self.running_returns[e] += step.reward;
                if step.done {
                    buf.episode_returns.push(self.running_returns[e]);
                    buf.episode_successes.push(step.success);
                    self.running_returns[e] = 0.0;
                    self.obs[e] = self.envs[e].reset(rng.next_u64());
                } else {
                    self.obs[e] = step.obs;
                }
            }
        }
        buf.last_values = critic_values(critic, &self.obs_rows()?)?.into_data();
        Ok(buf)
    }
}

/// Loss pieces for one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub anchor_loss: f64,
    pub ratio_mean: f64,
    pub clip_frac: f64,
}

/// Bound leaves of everything Stage 2 trains.
pub struct BoundLearner {
    pub generator: crate::policy::BoundGenerator,
    pub head: crate::nn::BoundLinear,
    pub critic: BoundMlp,
}

/// Builds `-J + c_v L_v - c_e H + lambda L_anchor` on `graph`.
#[allow(clippy::too_many_arguments)]
pub fn dbpo_loss(
    graph: &mut Graph,
    generator: &Generator,
    head: &ActorHead,
    bound: &BoundLearner,
    batch: &Minibatch,
    anchor_means: &Tensor,
    config: &PPOConfig,
    anchor_coef: f64,
) -> Result<LossParts> {
    let spec = *generator.spec();
    let n = batch.obs.shape()[0];
    let obs = graph.constant(batch.obs.clone());
    let z = graph.constant(batch.latents.clone());
    let vars = actor_forward_graph(
        graph,
        generator,
        &bound.generator,
        head,
        &bound.head,
        obs,
        z,
    )?;
    let x = graph.constant(batch.actions.clone());
    let new_lp = prefix_log_prob_graph(graph, x, &vars, &spec)?;
    let old_lp = graph.constant(batch.old_log_probs.clone());
    let delta = graph.sub(new_lp, old_lp)?;
    let delta = graph.clip(delta, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let ratio = graph.exp(delta)?;
    let adv = graph.constant(batch.advantages.clone());
    let unclipped = graph.mul(ratio, adv)?;
    let clipped_ratio = graph.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
    let clipped = graph.mul(clipped_ratio, adv)?;
    // min(a, b) = -max(-a, -b)
    let na = graph.neg(unclipped);
    let nb = graph.neg(clipped);
    let na = graph.reshape(na, &[n, 1])?;
    let nb = graph.reshape(nb, &[n, 1])?;
    let both = graph.concat(&[na, nb], 1)?;
    let worst = graph.max_axis(both, 1)?;
    let neg_objective = graph.mean(worst);

    let v = bound.critic.forward(graph, obs)?;
    let v = graph.reshape(v, &[n])?;
    let ret = graph.constant(batch.returns.clone());
    let verr = graph.sub(v, ret)?;
    let vsq = graph.square(verr)?;
    let vmean = graph.mean(vsq);
    let value_loss = graph.scale(vmean, 0.5)?;

    let ent = prefix_entropy_graph(graph, vars.log_std, &spec)?;
    let entropy = graph.mean(ent);

    let frozen = graph.constant(anchor_means.clone());
    let gap = graph.sub(vars.mean, frozen)?;
    let gsq = graph.square(gap)?;
    let gsum = graph.sum(gsq);
    let anchor = graph.scale(gsum, 1.0 / n as f64)?;

    let t1 = graph.scale(value_loss, config.value_coef)?;
    let t2 = graph.scale(entropy, -config.entropy_coef)?;
    let t3 = graph.scale(anchor, anchor_coef)?;
    let total = graph.add(neg_objective, t1)?;
    let total = graph.add(total, t2)?;
    let total = graph.add(total, t3)?;

    let ratios = graph.value(ratio).data();
    let ratio_mean = ratios.iter().sum::<f64>() / n as f64;
    let clip_frac = ratios
        .iter()
        .filter(|r| (*r - 1.0).abs() > config.clip_eps)
        .count() as f64
        / n as f64;
    Ok(LossParts {
        total,
        surrogate: -graph.value(neg_objective).item()?,
        value_loss: graph.value(value_loss).item()?,
        entropy: graph.value(entropy).item()?,
        anchor_loss: graph.value(anchor).item()?,
        ratio_mean,
        clip_frac,
    })
}

/// Averages over every minibatch of an update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub ratio_mean: f64,
    pub clip_frac: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub anchor_loss: f64,
    pub minibatches: usize,
}

pub const FINETUNE_HEADER: &str =
    "iter,mean_return,clip_frac,ratio_mean,value_loss,entropy,anchor_loss";

/// Everything Stage 2 owns.
#[derive(Clone, Debug)]
pub struct DbpoLearner {
    pub generator: Generator,
    pub head: ActorHead,
    pub critic: Mlp,
    pub anchor: AnchorSnapshot,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub config: PPOConfig,
    pub iteration: usize,
    pub dump_dir: Option<PathBuf>,
}

fn plain_adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        betas: (0.9, 0.999),
        weight_decay: 0.0,
        eps: 1e-8,
    }
}

impl DbpoLearner {
    /// Takes the anchor snapshot from `generator` as given.
    pub fn new(
        generator: Generator,
        head: ActorHead,
        critic: Mlp,
        config: PPOConfig,
    ) -> Result<Self> {
        config.validate()?;
        if head.scale.inputs() != generator.params.feature_dim()
            || head.scale.outputs() != generator.params.chunk_dim()
        {
            return Err(Error::Checkpoint(
                "scale head does not fit the generator".into(),
            ));
        }
        let mut actor_like = generator.params.tensors();
        actor_like.extend(head.tensors());
        let actor_opt = Adam::new(plain_adam(config.actor_lr), &actor_like);
        let critic_opt = Adam::new(plain_adam(config.critic_lr), &critic.tensors());
        Ok(Self {
            anchor: AnchorSnapshot::new(&generator),
            generator,
            head,
            critic,
            actor_opt,
            critic_opt,
            config,
            iteration: 0,
            dump_dir: None,
        })
    }

    fn bind(&self, graph: &mut Graph) -> BoundLearner {
        BoundLearner {
            generator: self.generator.params.bind(graph, true),
            head: self.head.bind(graph, true),
            critic: self.critic.bind(graph, true),
        }
    }

    /// Loss and gradients for one minibatch, gradients ordered as generator,
    /// head, critic.
    pub fn loss_and_grads(
        &self,
        batch: &Minibatch,
        anchor_coef: f64,
    ) -> Result<(LossParts, Vec<Tensor>, f64)> {
        let anchor_means = self.anchor.means(&batch.obs, &batch.latents)?;
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let parts = dbpo_loss(
            &mut graph,
            &self.generator,
            &self.head,
            &bound,
            batch,
            &anchor_means,
            &self.config,
            anchor_coef,
        )?;
        let total = graph.value(parts.total).item()?;
        let grads = graph.backward(parts.total)?;
        let mut vars = bound.generator.vars();
        vars.extend(bound.head.vars());
        vars.extend(bound.critic.vars());
        let mut like = self.generator.params.tensors();
        like.extend(self.head.tensors());
        like.extend(self.critic.tensors());
        Ok((parts, collect_grads(&grads, &vars, &like), total))
    }

    fn dump(&self, batch: &Minibatch, error: &str) -> Option<PathBuf> {
        #[derive(Serialize)]
        struct Dump<'a> {
            iteration: usize,
            error: &'a str,
            obs: &'a Tensor,
            latents: &'a Tensor,
            actions: &'a Tensor,
            old_log_probs: &'a Tensor,
            advantages: &'a Tensor,
            returns: &'a Tensor,
        }
        let dir = self.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite_iter{}.json", self.iteration));
        let d = Dump {
            iteration: self.iteration,
            error,
            obs: &batch.obs,
            latents: &batch.latents,
            actions: &batch.actions,
            old_log_probs: &batch.old_log_probs,
            advantages: &batch.advantages,
            returns: &batch.returns,
        };
        serde_json::to_string(&d)
            .ok()
            .and_then(|s| std::fs::write(&path, s).ok())
            .map(|_| path)
    }

    /// The PPO iteration on a buffer with advantages filled in.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        buffer: &RolloutBuffer,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let anchor_coef = self.config.anchor_at(self.iteration);
        let mut stats = UpdateStats::default();
        if buffer.is_empty() || self.config.update_epochs == 0 {
            self.iteration += 1;
            return Ok(stats);
        }
        if buffer.advantages.len() != buffer.len() {
            return Err(Error::config(
                "buffer has no advantages; run compute_gae first",
            ));
        }
        let adv = normalize_advantages(&buffer.advantages);
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        let n_gen = self.generator.params.tensors().len();
        let n_head = self.head.tensors().len();
        for _ in 0..self.config.update_epochs {
            order.shuffle(rng);
            for idx in order.chunks(self.config.minibatch_size) {
                let batch = buffer.minibatch(idx, &adv)?;
                let (parts, mut grads, total) = match self.loss_and_grads(&batch, anchor_coef) {
                    Ok(v) => v,
                    Err(Error::Tensor(
                        e @ (TensorError::NonFinite { .. } | TensorError::Domain { .. }),
                    )) => {
                        let dump = self.dump(&batch, &e.to_string());
                        return Err(Error::NonFinite {
                            what: format!("fine-tuning loss ({e})"),
                            step: self.iteration,
                            dump,
                        });
                    }
                    Err(e) => return Err(e),
                };
                if !total.is_finite() {
                    let dump = self.dump(&batch, "loss");
                    return Err(Error::NonFinite {
                        what: "fine-tuning loss".into(),
                        step: self.iteration,
                        dump,
                    });
                }
                let mut critic_grads = grads.split_off(n_gen + n_head);
                grad_clip(&mut grads, self.config.max_grad_norm)?;
                grad_clip(&mut critic_grads, self.config.max_grad_norm)?;
                {
                    let mut actor_params = self.generator.params.tensors_mut();
                    actor_params.extend(self.head.tensors_mut());
                    let lr = self.config.actor_lr;
                    self.actor_opt.step(&mut actor_params, &grads, lr)?;
                }
                let lr = self.config.critic_lr;
                self.critic_opt
                    .step(&mut self.critic.tensors_mut(), &critic_grads, lr)?;
                stats.ratio_mean += parts.ratio_mean;
                stats.clip_frac += parts.clip_frac;
                stats.value_loss += parts.value_loss;
                stats.entropy += parts.entropy;
                stats.anchor_loss += parts.anchor_loss;
                stats.minibatches += 1;
            }
        }
        let k = stats.minibatches as f64;
        stats.ratio_mean /= k;
        stats.clip_frac /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.anchor_loss /= k;
        self.iteration += 1;
        Ok(stats)
    }

    /// Mean `||mu_theta - mu_anchor||^2` on the given rows.
    pub fn anchor_distance(&self, obs: &Tensor, z: &Tensor) -> Result<f64> {
        let now = self.generator.generate_batch(obs, z)?;
        let then = self.anchor.means(obs, z)?;
        Ok(now.sub(&then)?.square()?.sum_all() / obs.shape()[0] as f64)
    }
}

/// One PPO iteration: alias for [`DbpoLearner::update`].
pub fn dbpo_update<R: Rng + ?Sized>(
    learner: &mut DbpoLearner,
    buffer: &RolloutBuffer,
    rng: &mut R,
) -> Result<UpdateStats> {
    learner.update(buffer, rng)
}

/// Per-iteration record for the fine-tuning log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterMetrics {
    pub iter: usize,
    pub mean_return: f64,
    pub stats: UpdateStats,
}

impl IterMetrics {
    pub fn csv_row(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.mean_return,
            s.clip_frac,
            s.ratio_mean,
            s.value_loss,
            s.entropy,
            s.anchor_loss
        )
    }
}

/// Collect, estimate advantages, update; `iterations` times.
pub fn finetune<R, F>(
    learner: &mut DbpoLearner,
    collector: &mut Collector,
    iterations: usize,
    rng: &mut R,
    mut on_iter: F,
) -> Result<Vec<IterMetrics>>
where
    R: Rng + ?Sized,
    F: FnMut(&DbpoLearner, &IterMetrics) -> Result<()>,
{
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut buffer = collector.collect(
            &learner.generator,
            &learner.head,
            &learner.critic,
            learner.config.rollout_steps,
            rng,
        )?;
        compute_gae(&mut buffer, learner.config.gamma, learner.config.gae_lambda);
        let iter = learner.iteration;
        let stats = learner.update(&buffer, rng)?;
        let mean_return = if buffer.episode_returns.is_empty() {
            0.0
        } else {
            buffer.episode_returns.iter().sum::<f64>() / buffer.episode_returns.len() as f64
        };
        let m = IterMetrics {
            iter,
            mean_return,
            stats,
        };
        log::info!(
            "iter {iter} return {mean_return:.3} ratio {:.4} clip {:.3} anchor {:.3e}",
            stats.ratio_mean,
            stats.clip_frac,
            stats.anchor_loss
        );
        on_iter(learner, &m)?;
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_undiscounted_zero_values_is_return_to_go() {
        let r = [1.0, 2.0, 3.0];
        let (a, ret) = gae(&r, &[0.0; 3], &[false, false, true], 9.0, 1.0, 1.0);
        assert_eq!(a, vec![6.0, 5.0, 3.0]);
        assert_eq!(ret, a);
    }

    #[test]
    fn gae_single_terminal_step() {
        let (a, _) = gae(&[0.7], &[0.2], &[true], 5.0, 0.99, 0.95);
        assert!((a[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ratio_and_surrogate_arithmetic() {
        assert_eq!(ppo_ratio(-1.25, -1.25), 1.0);
        assert!((ppo_ratio(2f64.ln(), 0.0) - 2.0).abs() < 1e-15);
        assert!(ppo_ratio(1e6, 0.0).is_finite());
        assert!((clipped_surrogate(&[1.5], &[1.0], 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(&[0.5], &[-1.0], 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(
            clipped_surrogate(&[1.0, 1.0], &[0.3, -2.0], 0.2),
            (0.3 - 2.0) / 2.0
        );
    }

    #[test]
    fn advantage_normalization() {
        let n = normalize_advantages(&[1.0, 2.0, 3.0]);
        let mean: f64 = n.iter().sum::<f64>() / 3.0;
        let var: f64 = n.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        assert_eq!(normalize_advantages(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn anchor_schedule() {
        let c = PPOConfig {
            anchor_coef: 2.0,
            anchor_decay_iters: Some(4),
            ..PPOConfig::default()
        };
        assert_eq!(c.anchor_at(0), 2.0);
        assert_eq!(c.anchor_at(2), 1.0);
        assert_eq!(c.anchor_at(9), 0.0);
        assert_eq!(PPOConfig::default().anchor_at(100), 1.0);
    }
}
