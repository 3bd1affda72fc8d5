//! One-step conditional generator: observation history and a latent draw in,
//! a flattened action chunk out, in a single network evaluation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::drift::HypothesisBatch;
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear, Parameters};

/// Horizon geometry of a predicted chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkSpec {
    /// Predicted steps `H`.
    pub horizon: usize,
    /// Per-step action dimension `d_a`.
    pub action_dim: usize,
    /// Observation history length `T_o`.
    pub obs_history: usize,
    /// Executed prefix length `H_e`.
    pub exec_steps: usize,
    /// Per-step observation dimension `d_o`.
    pub obs_dim: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self {
            horizon: 16,
            action_dim: 2,
            obs_history: 2,
            exec_steps: 8,
            obs_dim: 6,
        }
    }
}

impl ChunkSpec {
    pub fn validate(&self) -> Result<()> {
        let Self {
            horizon,
            action_dim,
            obs_history,
            exec_steps,
            obs_dim,
        } = *self;
        if action_dim == 0 || obs_dim == 0 {
            return Err(Error::config(
                "action and observation dims must be positive",
            ));
        }
        if !(1..=horizon).contains(&obs_history) {
            return Err(Error::config(format!(
                "observation history {obs_history} must lie in 1..={horizon}"
            )));
        }
        if exec_steps < 1 || exec_steps > horizon - obs_history + 1 {
            return Err(Error::config(format!(
                "executed prefix {exec_steps} must lie in 1..={}",
                horizon - obs_history + 1
            )));
        }
        Ok(())
    }

    /// Flattened chunk width `D = H * d_a`.
    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Flattened observation width `T_o * d_o`.
    pub fn obs_features(&self) -> usize {
        self.obs_history * self.obs_dim
    }

    /// Zero-based chunk steps that are executed: `T_o - 1 .. T_o - 1 + H_e`.
    pub fn exec_range(&self) -> std::ops::Range<usize> {
        self.obs_history - 1..self.obs_history - 1 + self.exec_steps
    }

    /// `[H, d_a]` binary pattern selecting the executed steps.
    pub fn prefix_mask(&self) -> Tensor {
        let mut mask = Tensor::zeros(&[self.horizon, self.action_dim]);
        for h in self.exec_range() {
            for m in 0..self.action_dim {
                mask.data_mut()[h * self.action_dim + m] = 1.0;
            }
        }
        mask
    }
}

/// `T_o x d_o` observation window, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationHistory {
    obs: Tensor,
}

impl ObservationHistory {
    pub fn new(obs: Tensor) -> Result<Self> {
        if obs.rank() != 2 {
            return Err(Error::config(format!(
                "observation history must be 2-d, got {:?}",
                obs.shape()
            )));
        }
        if !obs.is_finite() {
            return Err(Error::Env("non-finite observation".into()));
        }
        Ok(Self { obs })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.obs
    }

    /// `[1, T_o * d_o]` row for the network.
    pub fn flat_row(&self) -> Tensor {
        self.obs
            .reshape(&[1, self.obs.numel()])
            .expect("same element count")
    }
}

/// Latent draw `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    z: Tensor,
}

impl LatentSample {
    pub fn new(z: Tensor) -> Self {
        Self { z }
    }

    pub fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            z: Tensor::from_vec((0..dim).map(|_| StandardNormal.sample(rng)).collect()),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.z.numel()
    }
}

/// `[n, dim]` standard-normal draws, row-major from `rng`.
pub fn draw_latents<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![rows, dim], data).expect("shape matches")
}

/// A flattened action chunk of `H * d_a` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    values: Tensor,
    horizon: usize,
    action_dim: usize,
}

impl ActionChunk {
    pub fn new(values: Tensor, horizon: usize, action_dim: usize) -> Result<Self> {
        if values.numel() != horizon * action_dim {
            return Err(Error::config(format!(
                "chunk of {} values is not {horizon} x {action_dim}",
                values.numel()
            )));
        }
        let values = values.reshape(&[horizon * action_dim])?;
        Ok(Self {
            values,
            horizon,
            action_dim,
        })
    }

    pub fn flat(&self) -> &Tensor {
        &self.values
    }

    /// `[H, d_a]` view.
    pub fn steps(&self) -> Tensor {
        self.values
            .reshape(&[self.horizon, self.action_dim])
            .expect("same element count")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
}

/// The executed window `[a^{T_o}, .., a^{T_o + H_e - 1}]` as `[H_e, d_a]`.
pub fn executed_prefix(chunk: &ActionChunk, spec: &ChunkSpec) -> Result<Tensor> {
    spec.validate()?;
    if chunk.horizon != spec.horizon || chunk.action_dim != spec.action_dim {
        return Err(Error::config(format!(
            "chunk {}x{} does not match spec {}x{}",
            chunk.horizon, chunk.action_dim, spec.horizon, spec.action_dim
        )));
    }
    Ok(chunk
        .steps()
        .slice(0, spec.exec_range().start, spec.exec_steps)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Generation index; only 0 is accepted.
    pub tau: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 64,
            tau: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau != 0 {
            return Err(Error::config(
                "model.tau must be 0: generation is a single step",
            ));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        Ok(())
    }
}

/// Generator weights.
///
/// The observation embedding doubles as the state feature for the scale head
/// of the stochastic actor; it does not see the latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub obs_embed: Linear,
    pub latent_embed: Linear,
    pub trunk: Vec<Linear>,
    pub head: Linear,
}

impl Parameters for GeneratorParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.obs_embed.tensors();
        out.extend(self.latent_embed.tensors());
        for l in &self.trunk {
            out.extend(l.tensors());
        }
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.obs_embed.tensors_mut();
        out.extend(self.latent_embed.tensors_mut());
        for l in &mut self.trunk {
            out.extend(l.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }
}

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(spec: &ChunkSpec, model: &ModelConfig, rng: &mut R) -> Self {
        let h = model.hidden;
        Self {
            obs_embed: Linear::init(spec.obs_features(), h, rng),
            latent_embed: Linear::init(model.latent_dim, h, rng),
            trunk: vec![Linear::init(2 * h, h, rng), Linear::init(h, h, rng)],
            head: Linear::init(h, spec.chunk_dim(), rng),
        }
    }

    pub fn zeros(spec: &ChunkSpec, model: &ModelConfig) -> Self {
        let h = model.hidden;
        Self {
            obs_embed: Linear::zeros(spec.obs_features(), h),
            latent_embed: Linear::zeros(model.latent_dim, h),
            trunk: vec![Linear::zeros(2 * h, h), Linear::zeros(h, h)],
            head: Linear::zeros(h, spec.chunk_dim()),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_embed.inputs()
    }

    pub fn obs_features(&self) -> usize {
        self.obs_embed.inputs()
    }

    pub fn chunk_dim(&self) -> usize {
        self.head.outputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.obs_embed.outputs()
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            obs_embed: self.obs_embed.bind(graph, trainable),
            latent_embed: self.latent_embed.bind(graph, trainable),
            trunk: self
                .trunk
                .iter()
                .map(|l| l.bind(graph, trainable))
                .collect(),
            head: self.head.bind(graph, trainable),
        }
    }
}

/// Generator weights registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    obs_embed: BoundLinear,
    latent_embed: BoundLinear,
    trunk: Vec<BoundLinear>,
    head: BoundLinear,
}

impl BoundGenerator {
    /// Leaves in the same order as [`GeneratorParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.obs_embed.vars().to_vec();
        out.extend(self.latent_embed.vars());
        for l in &self.trunk {
            out.extend(l.vars());
        }
        out.extend(self.head.vars());
        out
    }
}

/// Output of one generator evaluation over a batch of rows.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// `[N, D]` chunk.
    pub chunk: Var,
    /// `[N, hidden]` observation feature.
    pub feature: Var,
}

/// Generator parameters plus a counter of network evaluations.
#[derive(Debug)]
pub struct Generator {
    pub params: GeneratorParams,
    spec: ChunkSpec,
    evaluations: AtomicU64,
}

impl Clone for Generator {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            spec: self.spec,
            evaluations: AtomicU64::new(0),
        }
    }
}

impl Generator {
    pub fn new(params: GeneratorParams, spec: ChunkSpec) -> Result<Self> {
        spec.validate()?;
        if params.obs_features() != spec.obs_features() || params.chunk_dim() != spec.chunk_dim() {
            return Err(Error::Checkpoint(format!(
                "generator maps {} -> {} but the chunk spec needs {} -> {}",
                params.obs_features(),
                params.chunk_dim(),
                spec.obs_features(),
                spec.chunk_dim()
            )));
        }
        Ok(Self {
            params,
            spec,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &ChunkSpec {
        &self.spec
    }

    /// Number of forward evaluations since creation or the last reset.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// One network evaluation over `N` rows: `obs` is `[N, T_o * d_o]` and
    /// `z` is `[N, C]`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &BoundGenerator,
        obs: Var,
        z: Var,
    ) -> Result<GeneratorOutput, TensorError> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let pre = bound.obs_embed.forward(graph, obs)?;
        let feature = graph.tanh(pre);
        let lat = bound.latent_embed.forward(graph, z)?;
        let lat = graph.tanh(lat);
        let mut x = graph.concat(&[feature, lat], 1)?;
        for layer in &bound.trunk {
            let pre = layer.forward(graph, x)?;
            x = graph.tanh(pre);
        }
        let chunk = bound.head.forward(graph, x)?;
        Ok(GeneratorOutput { chunk, feature })
    }

    /// Deterministic single chunk for one condition and one latent.
    pub fn generate(&self, obs: &ObservationHistory, z: &LatentSample) -> Result<ActionChunk> {
        if obs.tensor().numel() != self.params.obs_features() || z.dim() != self.params.latent_dim()
        {
            return Err(Error::config(format!(
                "generator expects {} observation features and latent dim {}",
                self.params.obs_features(),
                self.params.latent_dim()
            )));
        }
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let o = graph.constant(obs.flat_row());
        let zr = graph.constant(z.tensor().reshape(&[1, z.dim()])?);
        let out = self.forward(&mut graph, &bound, o, zr)?;
        let chunk = graph.value(out.chunk).clone();
        if !chunk.is_finite() {
            return Err(TensorError::NonFinite { op: "generate" }.into());
        }
        ActionChunk::new(chunk, self.spec.horizon, self.spec.action_dim)
    }

    /// Chunks for `[N, F]` observations and `[N, C]` latents, without a
    /// caller-provided graph. One evaluation regardless of `N`.
    pub fn generate_batch(&self, obs: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let o = graph.constant(obs.clone());
        let zv = graph.constant(z.clone());
        let out = self.forward(&mut graph, &bound, o, zv)?;
        Ok(graph.value(out.chunk).clone())
    }
}

/// Draws `G` latents per condition and evaluates all `B * G` rows in one
/// pass. `obs` is `[B, T_o * d_o]`; returns the `[B, G, D]` hypothesis batch
/// and the `[B, G, C]` latents in draw order.
pub fn sample_hypotheses<R: Rng + ?Sized>(
    graph: &mut Graph,
    generator: &Generator,
    bound: &BoundGenerator,
    obs: &Tensor,
    hypotheses: usize,
    rng: &mut R,
) -> Result<(HypothesisBatch, Tensor)> {
    if hypotheses == 0 {
        return Err(Error::config("at least one hypothesis is required"));
    }
    let (b, f) = (obs.shape()[0], obs.shape()[1]);
    let c = generator.params.latent_dim();
    let rows = obs
        .repeat_axis(1, hypotheses)?
        .reshape(&[b * hypotheses, f])?;
    let latents = draw_latents(b * hypotheses, c, rng);
    let o = graph.constant(rows);
    let z = graph.constant(latents.clone());
    let out = generator.forward(graph, bound, o, z)?;
    let d = generator.params.chunk_dim();
    let values = graph.reshape(out.chunk, &[b, hypotheses, d])?;
    Ok((
        HypothesisBatch::new(graph, values),
        latents.reshape(&[b, hypotheses, c])?,
    ))
}
