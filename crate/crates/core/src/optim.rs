//! Adam with decoupled weight decay, global-norm clipping, linear warmup and
//! an EMA shadow of the parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorError};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.95, 0.999),
            weight_decay: 1e-6,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::config(format!(
                "betas must lie in (0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("weight decay must be >= 0 and eps > 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: like.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: like.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One update at learning rate `lr`. Weight decay is applied as
    /// `p -= lr * wd * p`, so `lr = 0` leaves parameters untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let k = self.step as i32;
        let c1 = 1.0 - b1.powi(k);
        let c2 = 1.0 - b2.powi(k);
        let wd = self.config.weight_decay;
        let eps = self.config.eps;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((pi, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *pi -= lr * (update + wd * *pi);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn grad_clip(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!(
            "clip norm must be > 0, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    Ok(norm)
}

/// `base * min(1, k / warmup)` for the 1-based optimizer step `k`.
pub fn warmup_lr(base: f64, k: u64, warmup: u64) -> f64 {
    if warmup == 0 || k >= warmup {
        base
    } else {
        base * k as f64 / warmup as f64
    }
}

/// EMA coefficient `min(decay, ((1 + k) / (10 + k))^power)`.
pub fn ema_decay(step: u64, decay: f64, power: f64) -> f64 {
    let k = step as f64;
    decay.min(((1.0 + k) / (10.0 + k)).powf(power))
}

/// `shadow <- d * shadow + (1 - d) * params`, written as an increment so a
/// shadow equal to the parameters stays bit-identical.
pub fn ema_update(shadow: &mut [Tensor], params: &[&Tensor], d: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::config("EMA shadow and parameters differ in count"));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        if s.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ema_update",
                lhs: s.shape().to_vec(),
                rhs: p.shape().to_vec(),
            }
            .into());
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a += (1.0 - d) * (b - *a);
        }
    }
    Ok(())
}
