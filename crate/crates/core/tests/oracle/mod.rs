//! Brute-force references for the integration tests. Nothing here touches
//! the library; every quantity is recomputed with plain index loops.

#![allow(
    dead_code,
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord
)]

/// Field intermediates in row-major layout.
#[derive(Clone, Debug)]
pub struct LoopField {
    /// `[B][G][U]`
    pub distances: Vec<f64>,
    pub scale: f64,
    /// Per temperature, `[B][G][U]`.
    pub affinities: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<f64>>,
    /// Per temperature, `[B][G][S]`.
    pub forces: Vec<Vec<f64>>,
    pub normalized_forces: Vec<Vec<f64>>,
    pub drift: Vec<f64>,
    pub target: Vec<f64>,
}

/// Settings the loop field needs.
#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub temperatures: Vec<f64>,
    /// References `0..negative_len` repel, the rest attract.
    pub negative_len: usize,
    pub scale_floor: f64,
    pub force_floor: f64,
}

/// `hyp` is `[B][G][S]`, `refs` `[B][U][S]`, `weights` `[B][U]`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn drift_field_loops(
    hyp: &[f64],
    refs: &[f64],
    weights: &[f64],
    b_n: usize,
    g_n: usize,
    u_n: usize,
    s_n: usize,
    cfg: &LoopConfig,
) -> LoopField {
    let h = |b: usize, g: usize, s: usize| hyp[(b * g_n + g) * s_n + s];
    let y = |b: usize, u: usize, s: usize| refs[(b * u_n + u) * s_n + s];
    let w = |b: usize, u: usize| weights[b * u_n + u];
    let at = |b: usize, g: usize, u: usize| (b * g_n + g) * u_n + u;

    let mut dist = vec![0.0; b_n * g_n * u_n];
    for b in 0..b_n {
        for g in 0..g_n {
            for u in 0..u_n {
                let mut acc = 0.0;
                for s in 0..s_n {
                    let diff = h(b, g, s) - y(b, u, s);
                    acc += diff * diff;
                }
                dist[at(b, g, u)] = acc.sqrt();
            }
        }
    }

    let mut num = 0.0;
    let mut mass = 0.0;
    for b in 0..b_n {
        for u in 0..u_n {
            mass += w(b, u);
            for g in 0..g_n {
                num += dist[at(b, g, u)] * w(b, u);
            }
        }
    }
    let scale = f64::max(num / (g_n as f64 * mass), cfg.scale_floor);

    let mut affinities = Vec::new();
    let mut coefficients = Vec::new();
    let mut forces = Vec::new();
    let mut normalized_forces = Vec::new();
    let mut drift = vec![0.0; b_n * g_n * s_n];
    for &temp in &cfg.temperatures {
        let logit = |b: usize, g: usize, u: usize| -dist[at(b, g, u)] / (temp * scale);
        let mut aff = vec![0.0; b_n * g_n * u_n];
        for b in 0..b_n {
            for g in 0..g_n {
                for u in 0..u_n {
                    // softmax over references
                    let mut top = f64::NEG_INFINITY;
                    for v in 0..u_n {
                        top = top.max(logit(b, g, v));
                    }
                    let mut z = 0.0;
                    for v in 0..u_n {
                        z += (logit(b, g, v) - top).exp();
                    }
                    let p_ref = (logit(b, g, u) - top).exp() / z;
                    // softmax over hypotheses
                    let mut top = f64::NEG_INFINITY;
                    for q in 0..g_n {
                        top = top.max(logit(b, q, u));
                    }
                    let mut z = 0.0;
                    for q in 0..g_n {
                        z += (logit(b, q, u) - top).exp();
                    }
                    let p_hyp = (logit(b, g, u) - top).exp() / z;
                    aff[at(b, g, u)] = (p_ref * p_hyp).sqrt() * w(b, u);
                }
            }
        }

        let mut alpha = vec![0.0; b_n * g_n * u_n];
        if cfg.negative_len > 0 {
            for b in 0..b_n {
                for g in 0..g_n {
                    let mut neg = 0.0;
                    let mut pos = 0.0;
                    for u in 0..u_n {
                        if u < cfg.negative_len {
                            neg += aff[at(b, g, u)];
                        } else {
                            pos += aff[at(b, g, u)];
                        }
                    }
                    for u in 0..u_n {
                        alpha[at(b, g, u)] = if u < cfg.negative_len {
                            -aff[at(b, g, u)] * pos
                        } else {
                            aff[at(b, g, u)] * neg
                        };
                    }
                }
            }
        }

        let mut force = vec![0.0; b_n * g_n * s_n];
        for b in 0..b_n {
            for g in 0..g_n {
                for s in 0..s_n {
                    let mut acc = 0.0;
                    for u in 0..u_n {
                        acc += alpha[at(b, g, u)] * (y(b, u, s) - h(b, g, s));
                    }
                    force[(b * g_n + g) * s_n + s] = acc / scale;
                }
            }
        }

        let mut sq = 0.0;
        for f in &force {
            sq += f * f;
        }
        let denom = (sq / (b_n * g_n) as f64 + cfg.force_floor).sqrt();
        let mut normed = force.clone();
        for (k, f) in normed.iter_mut().enumerate() {
            *f /= denom;
            drift[k] += *f;
        }
        affinities.push(aff);
        coefficients.push(alpha);
        forces.push(force);
        normalized_forces.push(normed);
    }

    let mut target = vec![0.0; b_n * g_n * s_n];
    for k in 0..target.len() {
        target[k] = hyp[k] / scale + drift[k];
    }
    LoopField {
        distances: dist,
        scale,
        affinities,
        coefficients,
        forces,
        normalized_forces,
        drift,
        target,
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Scalar Gaussian log-density.
pub fn gaussian_logpdf(x: f64, mu: f64, sigma: f64) -> Result<f64, String> {
    if !(sigma > 0.0) {
        return Err(format!("sigma must be positive, got {sigma}"));
    }
    let z = (x - mu) / sigma;
    Ok(-0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * z * z)
}

/// GAE by its double-sum definition. `dones[t]` cuts the bootstrap after
/// step `t`; `last_value` bootstraps past the end.
pub fn gae_brute(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let next_v = |j: usize| if j + 1 < n { values[j + 1] } else { last_value };
    let delta = |j: usize| {
        let live = if dones[j] { 0.0 } else { 1.0 };
        rewards[j] + gamma * live * next_v(j) - values[j]
    };
    let mut adv = vec![0.0; n];
    for t in 0..n {
        let mut acc = 0.0;
        for j in t..n {
            let mut alive = true;
            for m in t..j {
                if dones[m] {
                    alive = false;
                }
            }
            if !alive {
                break;
            }
            acc += (gamma * lambda).powi((j - t) as i32) * delta(j);
        }
        adv[t] = acc;
    }
    let ret = (0..n).map(|t| adv[t] + values[t]).collect();
    (adv, ret)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[test]
fn finite_diff_trivial_cases() {
    let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
    assert!((g[0] - 6.0).abs() < 1e-8);
    assert_eq!(finite_diff(|_| 4.2, &[1.0, -2.0], 1e-3), vec![0.0, 0.0]);
}

#[test]
fn gaussian_logpdf_closed_forms() {
    let base = gaussian_logpdf(0.3, 0.3, 1.0).unwrap();
    assert!((base + 0.918_938_5).abs() < 1e-7);
    let off = gaussian_logpdf(0.3 + 2.0, 0.3, 2.0).unwrap();
    assert!((off - (gaussian_logpdf(0.3, 0.3, 2.0).unwrap() - 0.5)).abs() < 1e-15);
    assert!(gaussian_logpdf(0.0, 0.0, 0.0).is_err());
}
