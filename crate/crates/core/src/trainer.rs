//! Stage-1 training: minibatches of expert chunks, the drift regression step,
//! Adam with warmup and clipping, and an EMA shadow for evaluation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError};
use crate::drift::{drift_loss, DriftConfig};
use crate::env::ImitationDataset;
use crate::error::{Error, Result};
use crate::nn::{collect_grads, snapshot, Parameters};
use crate::optim::{ema_decay, ema_update, grad_clip, warmup_lr, Adam, AdamConfig};
use crate::policy::{sample_hypotheses, Generator, GeneratorParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub warmup_steps: u64,
    pub ema_decay: f64,
    pub ema_power: f64,
    /// Steps between intermediate checkpoints; `None` keeps only the final one.
    pub checkpoint_every: Option<u64>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            betas: (0.95, 0.999),
            weight_decay: 1e-6,
            grad_clip: 1.0,
            epochs: 1,
            max_steps: None,
            warmup_steps: 500,
            ema_decay: 0.9999,
            ema_power: 0.75,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("train.ema_decay must lie in (0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip must be > 0"));
        }
        self.adam().validate()
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub s_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss,grad_norm,s_norm,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss, self.grad_norm, self.s_norm, self.lr
        )
    }
}

/// Offending minibatch written out when a loss turns non-finite.
#[derive(Clone, Debug, Serialize)]
pub struct NonFiniteDump {
    pub step: u64,
    pub indices: Vec<usize>,
    pub obs: Tensor,
    pub positives: Tensor,
    pub latents: Option<Tensor>,
    pub error: String,
}

/// Live parameters, optimizer, EMA shadow and the minibatch rng.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub generator: Generator,
    pub ema: GeneratorParams,
    pub optimizer: Adam,
    pub drift: DriftConfig,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Where a non-finite minibatch is written; the system temp dir if unset.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(generator: Generator, drift: DriftConfig, config: TrainConfig) -> Result<Self> {
        drift.validate()?;
        config.validate()?;
        let optimizer = Adam::new(config.adam(), &generator.params.tensors());
        let ema = generator.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            generator,
            ema,
            optimizer,
            drift,
            config,
            rng,
            dump_dir: None,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.optimizer.step
    }

    /// One drift regression step on the records at `indices`.
    pub fn step(&mut self, dataset: &ImitationDataset, indices: &[usize]) -> Result<StepMetrics> {
        let k = self.optimizer.step + 1;
        let (obs, positives) = dataset.batch(indices);
        let spec = *dataset.spec();
        let mut graph = Graph::new();
        let bound = self.generator.params.bind(&mut graph, true);
        let mut latents = None;
        let attempt = (|| -> Result<(f64, f64, Vec<Tensor>)> {
            let (batch, z) = sample_hypotheses(
                &mut graph,
                &self.generator,
                &bound,
                &obs,
                self.drift.hypotheses,
                &mut self.rng,
            )?;
            latents = Some(z);
            let out = drift_loss(
                &mut graph,
                &batch,
                &positives,
                None,
                &self.drift,
                spec.action_dim,
            )?;
            let loss = graph.value(out.loss).item()?;
            if !loss.is_finite() {
                return Err(TensorError::NonFinite { op: "loss" }.into());
            }
            let grads = graph.backward(out.loss)?;
            let like = self.generator.params.tensors();
            Ok((
                loss,
                out.mean_scale(),
                collect_grads(&grads, &bound.vars(), &like),
            ))
        })();
        let (loss, s_norm, mut grads) = match attempt {
            Ok(v) => v,
            Err(Error::Tensor(
                e @ (TensorError::NonFinite { .. } | TensorError::Domain { .. }),
            )) => {
                return Err(self.abort(k, indices, obs, positives, latents, e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad_clip(&mut grads, self.config.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(self.abort(k, indices, obs, positives, latents, "gradient".into()));
        }
        let lr = warmup_lr(self.config.lr, k, self.config.warmup_steps);
        self.optimizer
            .step(&mut self.generator.params.tensors_mut(), &grads, lr)?;
        let d = ema_decay(k, self.config.ema_decay, self.config.ema_power);
        let mut shadow = snapshot(&self.ema);
        ema_update(&mut shadow, &self.generator.params.tensors(), d)?;
        for (dst, src) in self.ema.tensors_mut().into_iter().zip(shadow) {
            *dst = src;
        }
        Ok(StepMetrics {
            step: k,
            loss,
            grad_norm,
            s_norm,
            lr,
        })
    }

    fn abort(
        &self,
        step: u64,
        indices: &[usize],
        obs: Tensor,
        positives: Tensor,
        latents: Option<Tensor>,
        error: String,
    ) -> Error {
        log::error!("non-finite value at step {step}: {error}");
        let what = format!("loss ({error})");
        let dump = NonFiniteDump {
            step,
            indices: indices.to_vec(),
            obs,
            positives,
            latents,
            error,
        };
        let dir = self.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite_step{step}.json"));
        let written = serde_json::to_string(&dump)
            .ok()
            .and_then(|s| std::fs::write(&path, s).ok())
            .map(|_| path);
        Error::NonFinite {
            what,
            step: step as usize,
            dump: written,
        }
    }

    /// Generator carrying the EMA weights, as used for evaluation.
    pub fn ema_generator(&self) -> Generator {
        Generator::new(self.ema.clone(), *self.generator.spec()).expect("spec already checked")
    }
}

/// Runs `config.epochs` shuffled passes (or `max_steps` steps), calling
/// `on_step` after every step with the trainer state.
pub fn train<F>(
    dataset: &ImitationDataset,
    generator: Generator,
    drift: &DriftConfig,
    config: &TrainConfig,
    on_step: F,
) -> Result<(Trainer, Vec<StepMetrics>)>
where
    F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
{
    train_with_dump(dataset, generator, drift, config, None, on_step)
}

/// [`train`] with an explicit directory for non-finite dumps.
pub fn train_with_dump<F>(
    dataset: &ImitationDataset,
    generator: Generator,
    drift: &DriftConfig,
    config: &TrainConfig,
    dump_dir: Option<PathBuf>,
    mut on_step: F,
) -> Result<(Trainer, Vec<StepMetrics>)>
where
    F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset has no records".into()));
    }
    if dataset.spec() != generator.spec() {
        return Err(Error::config(format!(
            "dataset chunk spec {:?} does not match the model {:?}",
            dataset.spec(),
            generator.spec()
        )));
    }
    let mut trainer = Trainer::new(generator, drift.clone(), config.clone())?;
    trainer.dump_dir = dump_dir;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut trainer.rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| trainer.steps_done() >= m) {
                break 'epochs;
            }
            let m = trainer.step(dataset, chunk)?;
            log::debug!("step {} loss {} s {}", m.step, m.loss, m.s_norm);
            on_step(&trainer, &m)?;
            metrics.push(m);
        }
    }
    Ok((trainer, metrics))
}
