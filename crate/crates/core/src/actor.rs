//! Gaussian actor around the generator: the chunk is the mean, a linear head
//! on the observation feature gives a clipped per-coordinate log-scale.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear, Parameters};
use crate::policy::{
    ActionChunk, BoundGenerator, ChunkSpec, Generator, LatentSample, ObservationHistory,
};

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorConfig {
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Bias of the freshly created scale head.
    pub init_log_std: f64,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            log_std_min: -5.0,
            log_std_max: 1.0,
            init_log_std: -1.5,
        }
    }
}

impl ActorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::config(
                "actor.log_std_min must be below actor.log_std_max",
            ));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::config("actor.init_log_std must be finite"));
        }
        Ok(())
    }
}

/// Scale head `psi` plus its clip bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorHead {
    pub scale: Linear,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Parameters for ActorHead {
    fn tensors(&self) -> Vec<&Tensor> {
        self.scale.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.scale.tensors_mut()
    }
}

impl ActorHead {
    /// Zero weights, constant bias `init_log_std`.
    pub fn new(feature_dim: usize, chunk_dim: usize, config: &ActorConfig) -> Self {
        let mut scale = Linear::zeros(feature_dim, chunk_dim);
        scale.bias = Tensor::full(&[chunk_dim], config.init_log_std);
        Self {
            scale,
            log_std_min: config.log_std_min,
            log_std_max: config.log_std_max,
        }
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundLinear {
        self.scale.bind(graph, trainable)
    }
}

/// Actor mean and log-scale as graph nodes, both `[N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct ActorVars {
    pub mean: Var,
    pub log_std: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActorOutput {
    /// `[N, D]`
    pub mean: Tensor,
    /// `[N, D]`, already clipped.
    pub log_std: Tensor,
    pub spec: ChunkSpec,
}

impl GaussianActorOutput {
    /// `[H, d_a]` indicator of the executed steps.
    pub fn mask(&self) -> Tensor {
        self.spec.prefix_mask()
    }

    pub fn rows(&self) -> usize {
        self.mean.shape()[0]
    }
}

/// One generator evaluation producing mean and clipped log-scale.
pub fn actor_forward_graph(
    graph: &mut Graph,
    generator: &Generator,
    bound: &BoundGenerator,
    head: &ActorHead,
    bound_head: &BoundLinear,
    obs: Var,
    z: Var,
) -> Result<ActorVars, TensorError> {
    let out = generator.forward(graph, bound, obs, z)?;
    let raw = bound_head.forward(graph, out.feature)?;
    let log_std = graph.clip(raw, head.log_std_min, head.log_std_max);
    Ok(ActorVars {
        mean: out.chunk,
        log_std,
    })
}

/// Actor output for `[N, T_o * d_o]` observations and `[N, C]` latents.
pub fn actor_forward(
    generator: &Generator,
    head: &ActorHead,
    obs: &Tensor,
    z: &Tensor,
) -> Result<GaussianActorOutput> {
    let mut graph = Graph::new();
    let bound = generator.params.bind(&mut graph, false);
    let bh = head.bind(&mut graph, false);
    let o = graph.constant(obs.clone());
    let zv = graph.constant(z.clone());
    let vars = actor_forward_graph(&mut graph, generator, &bound, head, &bh, o, zv)?;
    let mean = graph.value(vars.mean).clone();
    let log_std = graph.value(vars.log_std).clone();
    if !mean.is_finite() || !log_std.is_finite() {
        return Err(TensorError::NonFinite {
            op: "actor_forward",
        }
        .into());
    }
    Ok(GaussianActorOutput {
        mean,
        log_std,
        spec: *generator.spec(),
    })
}

/// `x = mu + sigma * eta` for a given `[N, D]` noise tensor.
pub fn sample_with_noise(output: &GaussianActorOutput, eta: &Tensor) -> Result<Tensor> {
    Ok(output.mean.add(&output.log_std.exp()?.mul(eta)?)?)
}

/// Draws `eta ~ N(0, I)` and returns `(x, eta)`.
pub fn sample_action<R: Rng + ?Sized>(
    output: &GaussianActorOutput,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let data = (0..output.mean.numel())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let eta = Tensor::new(output.mean.shape().to_vec(), data)?;
    Ok((sample_with_noise(output, &eta)?, eta))
}

/// Executed-prefix columns `[N, H_e * d_a]` of an `[N, D]` chunk tensor.
pub fn prefix_columns(chunks: &Tensor, spec: &ChunkSpec) -> Result<Tensor> {
    let start = spec.exec_range().start * spec.action_dim;
    Ok(chunks.slice(1, start, spec.exec_steps * spec.action_dim)?)
}

/// Per-row Gaussian log-density of `x_exec` (`[N, H_e * d_a]`) restricted to
/// the executed coordinates. Returns `[N]`.
pub fn prefix_log_prob_graph(
    graph: &mut Graph,
    x_exec: Var,
    vars: &ActorVars,
    spec: &ChunkSpec,
) -> Result<Var, TensorError> {
    let start = spec.exec_range().start * spec.action_dim;
    let len = spec.exec_steps * spec.action_dim;
    let mu = graph.slice(vars.mean, 1, start, len)?;
    let ls = graph.slice(vars.log_std, 1, start, len)?;
    let diff = graph.sub(x_exec, mu)?;
    let sq = graph.square(diff)?;
    let m2 = graph.scale(ls, -2.0)?;
    let inv_var = graph.exp(m2)?;
    let quad = graph.mul(sq, inv_var)?;
    let half = graph.scale(quad, -0.5)?;
    let per = graph.sub(half, ls)?;
    let per = graph.add_scalar(per, -HALF_LN_2PI)?;
    graph.sum_axis(per, 1)
}

/// Per-row entropy of the executed coordinates. Returns `[N]`.
pub fn prefix_entropy_graph(
    graph: &mut Graph,
    log_std: Var,
    spec: &ChunkSpec,
) -> Result<Var, TensorError> {
    let start = spec.exec_range().start * spec.action_dim;
    let len = spec.exec_steps * spec.action_dim;
    let ls = graph.slice(log_std, 1, start, len)?;
    let per = graph.add_scalar(ls, 0.5 + HALF_LN_2PI)?;
    graph.sum_axis(per, 1)
}

/// [`prefix_log_prob_graph`] on plain tensors.
pub fn prefix_log_prob(x_exec: &Tensor, output: &GaussianActorOutput) -> Result<Tensor> {
    let len = output.spec.exec_steps * output.spec.action_dim;
    let x = x_exec.reshape(&[output.rows(), len]).map_err(|_| {
        Error::config(format!(
            "executed prefix needs {} x {len} values, got {:?}",
            output.rows(),
            x_exec.shape()
        ))
    })?;
    if output.log_std.data().iter().any(|&v| !v.is_finite()) {
        return Err(TensorError::Domain {
            op: "prefix_log_prob",
        }
        .into());
    }
    let mut graph = Graph::new();
    let xv = graph.constant(x);
    let vars = ActorVars {
        mean: graph.constant(output.mean.clone()),
        log_std: graph.constant(output.log_std.clone()),
    };
    let lp = prefix_log_prob_graph(&mut graph, xv, &vars, &output.spec)?;
    Ok(graph.value(lp).clone())
}

/// [`prefix_entropy_graph`] on plain tensors.
pub fn prefix_entropy(output: &GaussianActorOutput) -> Result<Tensor> {
    let mut graph = Graph::new();
    let ls = graph.constant(output.log_std.clone());
    let h = prefix_entropy_graph(&mut graph, ls, &output.spec)?;
    Ok(graph.value(h).clone())
}

/// Deterministic deployment: the actor mean, one generator evaluation.
pub fn deploy_action(
    generator: &Generator,
    obs: &ObservationHistory,
    z: &LatentSample,
) -> Result<ActionChunk> {
    generator.generate(obs, z)
}
