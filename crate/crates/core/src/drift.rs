//! Drift field and fixed-point regression loss.
//!
//! For a minibatch of `B` conditions with `G` hypotheses each, the field is
//! built from detached values only:
//!
//! 1. distances `d[i,r,u]` between hypothesis `(i,r)` and reference `(i,u)`;
//! 2. a batch-global scale `s` (weighted mean distance, floored);
//! 3. per temperature `R`, the affinity
//!    `A = sqrt(softmax_u(-d/(R s)) * softmax_r(-d/(R s))) * w`;
//! 4. signed coefficients that repel from the negative side and attract to
//!    the positive side, with equal mass on both sides;
//! 5. forces `F = sum_u alpha (Y_u - G_r) / s`, RMS-normalized per
//!    temperature and summed into `V`;
//! 6. the detached target `X = G/s + V`.
//!
//! The loss regresses `G/s` onto `X`. Its forward value is `mean(V^2)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// One drift field over the flattened chunk (`S = H * d_a`).
    Chunk,
    /// One drift field per time step (`S = d_a`), averaged over the horizon.
    StepWise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub hypotheses: usize,
    pub temperatures: Vec<f64>,
    pub negatives: usize,
    pub positives: usize,
    pub scale_floor: f64,
    pub force_floor: f64,
    pub loss_mode: LossMode,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            hypotheses: 4,
            temperatures: vec![0.2],
            negatives: 0,
            positives: 1,
            scale_floor: 1e-6,
            force_floor: 1e-6,
            loss_mode: LossMode::Chunk,
        }
    }
}

impl DriftConfig {
    /// Three-temperature set `{0.02, 0.05, 0.2}`.
    pub fn multi_scale() -> Self {
        Self {
            temperatures: vec![0.02, 0.05, 0.2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hypotheses == 0 {
            return Err(Error::config("drift.hypotheses must be at least 1"));
        }
        if self.positives == 0 {
            return Err(Error::config(
                "drift.positives must be at least 1 (empty expert pool)",
            ));
        }
        if self.temperatures.is_empty() {
            return Err(Error::config("drift.temperatures must be non-empty"));
        }
        for (k, &t) in self.temperatures.iter().enumerate() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("temperature {t} must be positive")));
            }
            if self.temperatures[..k].contains(&t) {
                return Err(Error::config(format!("temperature {t} listed twice")));
            }
        }
        if !(self.scale_floor > 0.0) || !(self.force_floor > 0.0) {
            return Err(Error::config("drift floors must be positive"));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.hypotheses + self.negatives + self.positives
    }
}

/// Reference pool `Y = [detached hypotheses, negatives, positives]`.
///
/// Indices `0..G+C_n` form the repulsive side and the rest the attractive
/// side.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePool {
    refs: Tensor,
    weights: Tensor,
    negative_len: usize,
}

impl ReferencePool {
    /// Concatenates the detached hypotheses `[B,G,S]` with optional explicit
    /// negatives `[B,C_n,S]` and the positives `[B,C_p,S]`. Weights default
    /// to one per reference.
    pub fn build(
        detached: &Tensor,
        negatives: Option<&Tensor>,
        positives: &Tensor,
        weights: Option<Tensor>,
    ) -> Result<Self> {
        if detached.rank() != 3 || positives.rank() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "reference_pool",
                lhs: detached.shape().to_vec(),
                rhs: positives.shape().to_vec(),
            }
            .into());
        }
        let mut parts = vec![detached];
        if let Some(n) = negatives {
            parts.push(n);
        }
        parts.push(positives);
        let refs = Tensor::concat(&parts, 1)?;
        let (b, u) = (refs.shape()[0], refs.shape()[1]);
        let negative_len = u - positives.shape()[1];
        let weights = match weights {
            Some(w) => {
                if w.shape() != [b, u] {
                    return Err(TensorError::ShapeMismatch {
                        op: "reference_weights",
                        lhs: w.shape().to_vec(),
                        rhs: vec![b, u],
                    }
                    .into());
                }
                if w.data().iter().any(|&x| !(x >= 0.0)) {
                    return Err(Error::config("reference weights must be non-negative"));
                }
                w
            }
            None => Tensor::ones(&[b, u]),
        };
        Ok(Self {
            refs,
            weights,
            negative_len,
        })
    }

    pub fn refs(&self) -> &Tensor {
        &self.refs
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.refs.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of references on the repulsive side (`G + C_n`).
    pub fn negative_len(&self) -> usize {
        self.negative_len
    }

    pub fn negative_indices(&self) -> std::ops::Range<usize> {
        0..self.negative_len
    }

    pub fn positive_indices(&self) -> std::ops::Range<usize> {
        self.negative_len..self.len()
    }
}

/// Every intermediate of one drift-field evaluation.
#[derive(Clone, Debug)]
pub struct DriftFieldTensors {
    pub distances: Tensor,
    pub scale: f64,
    /// One entry per temperature, in config order.
    pub affinities: Vec<Tensor>,
    pub coefficients: Vec<Tensor>,
    pub forces: Vec<Tensor>,
    pub normalized_forces: Vec<Tensor>,
    pub drift: Tensor,
    pub target: Tensor,
}

/// `d[i,r,u] = |detached[i,r] - refs[i,u]|`, shape `[B,G,U]`.
pub fn pairwise_distances(detached: &Tensor, refs: &Tensor) -> Result<Tensor> {
    let (ds, rs) = (detached.shape(), refs.shape());
    if ds.len() != 3 || rs.len() != 3 || ds[0] != rs[0] || ds[2] != rs[2] {
        return Err(TensorError::ShapeMismatch {
            op: "pairwise_distances",
            lhs: ds.to_vec(),
            rhs: rs.to_vec(),
        }
        .into());
    }
    let (g, u) = (ds[1], rs[1]);
    let hyp = detached.repeat_axis(2, u)?;
    let pool = refs.repeat_axis(1, g)?;
    Ok(hyp.sub(&pool)?.norm_last()?)
}

/// Weighted mean distance, floored at `scale_floor`.
///
/// Each reference weight counts once per `(i,u)`, so the weighted distance
/// sum is divided by `G` times the total weight.
pub fn global_scale(distances: &Tensor, weights: &Tensor, scale_floor: f64) -> Result<f64> {
    let (ds, ws) = (distances.shape(), weights.shape());
    if ds.len() != 3 || ws != [ds[0], ds[2]] {
        return Err(TensorError::ShapeMismatch {
            op: "global_scale",
            lhs: ds.to_vec(),
            rhs: ws.to_vec(),
        }
        .into());
    }
    let mass = weights.sum_all();
    if !(mass > 0.0) {
        return Err(Error::config("reference weights have zero total mass"));
    }
    let weighted = distances.mul(&weights.repeat_axis(1, ds[1])?)?.sum_all();
    Ok((weighted / (ds[1] as f64 * mass)).max(scale_floor))
}

/// Geometric mean of the reference-axis and hypothesis-axis softmaxes of the
/// logits `-d / (R s)`, times the reference weight.
pub fn symmetric_affinity(
    distances: &Tensor,
    scale: f64,
    temperature: f64,
    weights: &Tensor,
) -> Result<Tensor> {
    let logits = distances.scale(-1.0 / (temperature * scale))?;
    let over_refs = logits.softmax_axis(2)?;
    let over_hyps = logits.softmax_axis(1)?;
    let g = distances.shape()[1];
    Ok(over_refs
        .mul(&over_hyps)?
        .sqrt()?
        .mul(&weights.repeat_axis(1, g)?)?)
}

/// Signed coefficients: `-A * S_plus` on the repulsive side and
/// `A * S_minus` on the attractive side, where the side masses are row sums
/// of `A` over each side.
pub fn balanced_coefficients(affinity: &Tensor, negative_len: usize) -> Result<Tensor> {
    let u = affinity.shape()[2];
    if negative_len >= u {
        return Err(Error::config("reference pool has no positive references"));
    }
    if negative_len == 0 {
        // No repulsive side, so S_minus is zero and so is every coefficient.
        return Ok(Tensor::zeros(affinity.shape()));
    }
    let positive_len = u - negative_len;
    let neg = affinity.slice(2, 0, negative_len)?;
    let pos = affinity.slice(2, negative_len, positive_len)?;
    let neg_mass = neg.sum_axis(2)?;
    let pos_mass = pos.sum_axis(2)?;
    let alpha_neg = neg.mul(&pos_mass.repeat_axis(2, negative_len)?)?.neg();
    let alpha_pos = pos.mul(&neg_mass.repeat_axis(2, positive_len)?)?;
    Ok(Tensor::concat(&[&alpha_neg, &alpha_pos], 2)?)
}

/// `F[i,r] = sum_u alpha[i,r,u] (Y[i,u] - G[i,r]) / s`, shape `[B,G,S]`.
pub fn per_scale_force(
    coefficients: &Tensor,
    refs: &Tensor,
    detached: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let pulled = coefficients.matmul(refs)?;
    let row_mass = coefficients.sum_axis(2)?;
    let s = detached.shape()[2];
    let anchored = row_mass.repeat_axis(2, s)?.mul(detached)?;
    Ok(pulled.sub(&anchored)?.scale(1.0 / scale)?)
}

/// Divides `F` by `sqrt(mean_{i,r} |F[i,r]|^2 + force_floor)`.
pub fn rms_normalize(force: &Tensor, force_floor: f64) -> Result<Tensor> {
    let rows = (force.shape()[0] * force.shape()[1]) as f64;
    let mean_sq = force.square()?.sum_all() / rows;
    Ok(force.scale(1.0 / (mean_sq + force_floor).sqrt())?)
}

/// `V = sum_R F_hat[R]` and the detached target `X = G/s + V`.
pub fn aggregate_and_target(
    normalized: &[Tensor],
    detached: &Tensor,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let (first, rest) = normalized
        .split_first()
        .ok_or_else(|| Error::config("at least one temperature is required"))?;
    let mut drift = first.clone();
    for f in rest {
        drift = drift.add(f)?;
    }
    let target = detached.scale(1.0 / scale)?.add(&drift)?;
    Ok((drift, target))
}

/// Full drift-field pipeline for one `[B,G,S]` hypothesis block.
pub fn compute_field(
    detached: &Tensor,
    pool: &ReferencePool,
    config: &DriftConfig,
) -> Result<DriftFieldTensors> {
    let distances = pairwise_distances(detached, pool.refs())?;
    let scale = global_scale(&distances, pool.weights(), config.scale_floor)?;
    let mut affinities = Vec::with_capacity(config.temperatures.len());
    let mut coefficients = Vec::with_capacity(config.temperatures.len());
    let mut forces = Vec::with_capacity(config.temperatures.len());
    let mut normalized_forces = Vec::with_capacity(config.temperatures.len());
    for &temperature in &config.temperatures {
        let a = symmetric_affinity(&distances, scale, temperature, pool.weights())?;
        let alpha = balanced_coefficients(&a, pool.negative_len())?;
        let f = per_scale_force(&alpha, pool.refs(), detached, scale)?;
        normalized_forces.push(rms_normalize(&f, config.force_floor)?);
        affinities.push(a);
        coefficients.push(alpha);
        forces.push(f);
    }
    let (drift, target) = aggregate_and_target(&normalized_forces, detached, scale)?;
    Ok(DriftFieldTensors {
        distances,
        scale,
        affinities,
        coefficients,
        forces,
        normalized_forces,
        drift,
        target,
    })
}

/// Generated hypotheses on a graph plus their detached values.
#[derive(Clone, Debug)]
pub struct HypothesisBatch {
    /// `[B,G,S]` node carrying the generator gradient.
    pub values: Var,
    /// Stop-gradient copy of `values`.
    pub detached: Tensor,
}

impl HypothesisBatch {
    pub fn new(graph: &Graph, values: Var) -> Self {
        Self {
            values,
            detached: graph.value(values).clone(),
        }
    }
}

/// Regression of `values / s` onto the detached `target`, averaged over all
/// elements. `scale` is a constant of the backward pass.
pub fn dbp_loss(graph: &mut Graph, values: Var, target: &Tensor, scale: f64) -> Result<Var> {
    if graph.shape(values) != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dbp_loss",
            lhs: graph.shape(values).to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let pred = graph.scale(values, 1.0 / scale)?;
    let tgt = graph.constant(target.clone());
    let diff = graph.sub(pred, tgt)?;
    let sq = graph.square(diff)?;
    Ok(graph.mean(sq))
}

/// Loss plus the drift fields it was built from (one per slice in step-wise
/// mode).
#[derive(Debug)]
pub struct DriftLoss {
    pub loss: Var,
    pub fields: Vec<DriftFieldTensors>,
}

impl DriftLoss {
    /// Mean of the field scales, for logging.
    pub fn mean_scale(&self) -> f64 {
        self.fields.iter().map(|f| f.scale).sum::<f64>() / self.fields.len() as f64
    }
}

/// Builds the drift-field loss for a hypothesis batch.
///
/// `positives` is `[B,C_p,D]` and `negatives` `[B,C_n,D]` in the flattened
/// chunk layout. In step-wise mode each of the `D / step_dim` time slices
/// gets its own field and the slice losses are averaged.
pub fn drift_loss(
    graph: &mut Graph,
    batch: &HypothesisBatch,
    positives: &Tensor,
    negatives: Option<&Tensor>,
    config: &DriftConfig,
    step_dim: usize,
) -> Result<DriftLoss> {
    config.validate()?;
    let shape = batch.detached.shape().to_vec();
    if shape.len() != 3 || shape[1] != config.hypotheses {
        return Err(Error::config(format!(
            "hypothesis block {shape:?} does not carry {} hypotheses",
            config.hypotheses
        )));
    }
    if positives.shape() != [shape[0], config.positives, shape[2]] {
        return Err(TensorError::ShapeMismatch {
            op: "positives",
            lhs: positives.shape().to_vec(),
            rhs: vec![shape[0], config.positives, shape[2]],
        }
        .into());
    }
    match (negatives, config.negatives) {
        (None, 0) => {}
        (Some(n), c) if n.shape() == [shape[0], c, shape[2]] => {}
        _ => {
            return Err(Error::config(format!(
                "expected {} explicit negatives per condition",
                config.negatives
            )))
        }
    }
    match config.loss_mode {
        LossMode::Chunk => {
            let pool = ReferencePool::build(&batch.detached, negatives, positives, None)?;
            let field = compute_field(&batch.detached, &pool, config)?;
            let loss = dbp_loss(graph, batch.values, &field.target, field.scale)?;
            Ok(DriftLoss {
                loss,
                fields: vec![field],
            })
        }
        LossMode::StepWise => {
            let (b, g, d) = (shape[0], shape[1], shape[2]);
            if step_dim == 0 || d % step_dim != 0 {
                return Err(Error::config(format!(
                    "chunk width {d} is not a multiple of the action dim {step_dim}"
                )));
            }
            let steps = d / step_dim;
            let slice_of = |t: &Tensor, h: usize| t.slice(2, h * step_dim, step_dim);
            let mut fields = Vec::with_capacity(steps);
            let mut total: Option<Var> = None;
            for h in 0..steps {
                let detached = slice_of(&batch.detached, h)?;
                let pos = slice_of(positives, h)?;
                let neg = negatives.map(|n| slice_of(n, h)).transpose()?;
                let pool = ReferencePool::build(&detached, neg.as_ref(), &pos, None)?;
                let field = compute_field(&detached, &pool, config)?;
                let values = graph.slice(batch.values, 2, h * step_dim, step_dim)?;
                debug_assert_eq!(graph.shape(values), [b, g, step_dim]);
                let slice_loss = dbp_loss(graph, values, &field.target, field.scale)?;
                total = Some(match total {
                    Some(acc) => graph.add(acc, slice_loss)?,
                    None => slice_loss,
                });
                fields.push(field);
            }
            let loss = graph.scale(total.expect("at least one slice"), 1.0 / steps as f64)?;
            Ok(DriftLoss { loss, fields })
        }
    }
}
