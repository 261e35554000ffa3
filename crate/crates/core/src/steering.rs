//! Latent refinement by push/pull gradient descent.
//!
//! The refined latent `L` minimises
//!
//! ```text
//! J(L) = −α · mean_{D ∈ desired} sim(D, L)
//!        + β · mean_{U ∈ undesired} sim(U, L)
//!        + λ · reg(L − L₀)
//! ```
//!
//! where `sim` is cosine similarity or a raw dot product and `reg` is the
//! squared ℓ2 norm or the ℓ1 norm. An empty anchor set contributes zero.
//! Descent starts at `L₀`, so with both weights at zero nothing moves.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm, NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SteeringError {
    #[error("both anchor sets are empty")]
    NoAnchors,
    #[error("{set} anchor {index} has zero norm")]
    ZeroAnchor { set: &'static str, index: usize },
    #[error("{set} anchor {index} has shape {got:?}, latent is {want:?}")]
    AnchorShape {
        set: &'static str,
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("latent has zero norm; cosine similarity is undefined")]
    ZeroLatent,
    #[error("objective became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("invalid steering config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// `‖L − L₀‖²`
    #[default]
    L2,
    /// `Σ |L − L₀|`, subgradient `sign` with `sign(0) = 0`.
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    pub alpha: f32,
    pub beta: f32,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default)]
    pub reg: Regularizer,
    #[serde(default = "one")]
    pub reg_weight: f32,
    pub lr: f32,
    pub steps: usize,
    #[serde(default)]
    pub grad_clip: Option<f32>,
}

fn one() -> f32 {
    1.0
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            similarity: Similarity::Cosine,
            reg: Regularizer::L2,
            reg_weight: 1.0,
            lr: 0.05,
            steps: 50,
            grad_clip: None,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<(), SteeringError> {
        let finite_nonneg = |v: f32| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.alpha) || !finite_nonneg(self.beta) {
            return Err(SteeringError::Config("alpha and beta must be finite and >= 0".into()));
        }
        if !finite_nonneg(self.reg_weight) {
            return Err(SteeringError::Config("reg_weight must be finite and >= 0".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(SteeringError::Config("lr must be finite and > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(SteeringError::Config("grad_clip must be finite and > 0".into()));
            }
        }
        Ok(())
    }
}

/// Desired (pull) and undesired (push) latents.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnchorSets {
    pub desired: Vec<Tensor>,
    pub undesired: Vec<Tensor>,
}

impl AnchorSets {
    pub fn new(desired: Vec<Tensor>, undesired: Vec<Tensor>) -> Self {
        Self { desired, undesired }
    }

    pub fn is_empty(&self) -> bool {
        self.desired.is_empty() && self.undesired.is_empty()
    }

    /// Every anchor must match `shape` and have nonzero norm.
    pub fn validate(&self, shape: &[usize]) -> Result<(), SteeringError> {
        for (set, anchors) in [("desired", &self.desired), ("undesired", &self.undesired)] {
            for (index, a) in anchors.iter().enumerate() {
                if a.shape() != shape {
                    return Err(SteeringError::AnchorShape {
                        set,
                        index,
                        got: a.shape().to_vec(),
                        want: shape.to_vec(),
                    });
                }
                if a.norm() == 0.0 {
                    return Err(SteeringError::ZeroAnchor { set, index });
                }
            }
        }
        Ok(())
    }
}

/// Anchors in the form the objective consumes: unit vectors for cosine,
/// raw for dot.
struct Prepared {
    desired: Vec<Vec<f32>>,
    undesired: Vec<Vec<f32>>,
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = f64::from(norm(v));
    v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
}

fn prepare(anchors: &AnchorSets, sim: Similarity) -> Prepared {
    let conv = |a: &Tensor| match sim {
        Similarity::Cosine => unit(a.data()),
        Similarity::Dot => a.data().to_vec(),
    };
    Prepared {
        desired: anchors.desired.iter().map(conv).collect(),
        undesired: anchors.undesired.iter().map(conv).collect(),
    }
}

fn mean_similarity(anchors: &[Vec<f32>], l: &[f32], l_norm: f32, sim: Similarity) -> f32 {
    if anchors.is_empty() {
        return 0.0;
    }
    let total: f64 = anchors
        .iter()
        .map(|a| {
            let d = f64::from(dot(a, l));
            match sim {
                Similarity::Cosine => (d / f64::from(l_norm)).clamp(-1.0, 1.0),
                Similarity::Dot => d,
            }
        })
        .sum();
    (total / anchors.len() as f64) as f32
}

fn reg_value(l: &[f32], l0: &[f32], reg: Regularizer) -> f32 {
    let total: f64 = l
        .iter()
        .zip(l0)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            match reg {
                Regularizer::L2 => d * d,
                Regularizer::L1 => d.abs(),
            }
        })
        .sum();
    total as f32
}

fn latent_norm(l: &[f32], sim: Similarity) -> Result<f32, SteeringError> {
    let n = norm(l);
    if sim == Similarity::Cosine && n == 0.0 {
        return Err(SteeringError::ZeroLatent);
    }
    Ok(n)
}

fn objective_prepared(
    l: &[f32],
    l0: &[f32],
    p: &Prepared,
    cfg: &SteeringConfig,
) -> Result<f32, SteeringError> {
    let n = latent_norm(l, cfg.similarity)?;
    let pull = mean_similarity(&p.desired, l, n, cfg.similarity);
    let push = mean_similarity(&p.undesired, l, n, cfg.similarity);
    Ok(-cfg.alpha * pull + cfg.beta * push + cfg.reg_weight * reg_value(l, l0, cfg.reg))
}

/// Adds `weight · mean_a ∂sim(a, L)/∂L` into `grad`.
fn accumulate_sim_grad(
    grad: &mut [f64],
    anchors: &[Vec<f32>],
    l: &[f32],
    l_norm: f32,
    sim: Similarity,
    weight: f32,
) {
    if anchors.is_empty() {
        return;
    }
    let w = f64::from(weight) / anchors.len() as f64;
    let n = f64::from(l_norm);
    for a in anchors {
        match sim {
            Similarity::Dot => {
                for (g, &av) in grad.iter_mut().zip(a) {
                    *g += w * f64::from(av);
                }
            }
            Similarity::Cosine => {
                // ∂/∂L (â·L / ‖L‖) = â/‖L‖ − (â·L) L / ‖L‖³, with â = a/‖a‖.
                let d = f64::from(dot(a, l));
                let c1 = 1.0 / n;
                let c2 = d / (n * n * n);
                for ((g, &av), &lv) in grad.iter_mut().zip(a).zip(l) {
                    *g += w * (c1 * f64::from(av) - c2 * f64::from(lv));
                }
            }
        }
    }
}

fn grad_prepared(
    l: &[f32],
    l0: &[f32],
    p: &Prepared,
    cfg: &SteeringConfig,
) -> Result<Vec<f32>, SteeringError> {
    let n = latent_norm(l, cfg.similarity)?;
    let mut grad = vec![0.0f64; l.len()];
    accumulate_sim_grad(&mut grad, &p.desired, l, n, cfg.similarity, -cfg.alpha);
    accumulate_sim_grad(&mut grad, &p.undesired, l, n, cfg.similarity, cfg.beta);
    let lam = f64::from(cfg.reg_weight);
    for ((g, &x), &y) in grad.iter_mut().zip(l).zip(l0) {
        let d = f64::from(x) - f64::from(y);
        *g += match cfg.reg {
            Regularizer::L2 => 2.0 * lam * d,
            Regularizer::L1 => {
                if d > 0.0 {
                    lam
                } else if d < 0.0 {
                    -lam
                } else {
                    0.0
                }
            }
        };
    }
    Ok(grad.into_iter().map(|g| g as f32).collect())
}

fn check_inputs(l: &Tensor, l0: &Tensor, anchors: &AnchorSets) -> Result<(), SteeringError> {
    l.check_same_shape(l0)?;
    anchors.validate(l.shape())
}

/// Value of the steering objective at `l`.
pub fn objective(
    l: &Tensor,
    l0: &Tensor,
    anchors: &AnchorSets,
    cfg: &SteeringConfig,
) -> Result<f32, SteeringError> {
    check_inputs(l, l0, anchors)?;
    let p = prepare(anchors, cfg.similarity);
    objective_prepared(l.data(), l0.data(), &p, cfg)
}

/// Exact gradient of [`objective`] with respect to `l`.
pub fn objective_grad(
    l: &Tensor,
    l0: &Tensor,
    anchors: &AnchorSets,
    cfg: &SteeringConfig,
) -> Result<Tensor, SteeringError> {
    check_inputs(l, l0, anchors)?;
    let p = prepare(anchors, cfg.similarity);
    let g = grad_prepared(l.data(), l0.data(), &p, cfg)?;
    Ok(Tensor::new(l.shape().to_vec(), g)?)
}

/// Mean similarity of `l` to the undesired set (0 when it is empty).
pub fn undesired_similarity(
    l: &Tensor,
    anchors: &AnchorSets,
    sim: Similarity,
) -> Result<f32, SteeringError> {
    anchors.validate(l.shape())?;
    let p = prepare(anchors, sim);
    let n = latent_norm(l.data(), sim)?;
    Ok(mean_similarity(&p.undesired, l.data(), n, sim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringResult {
    pub latent: Tensor,
    /// Objective at `L₀` and after every step; length `steps + 1`.
    pub objective_trace: Vec<f32>,
    /// Mean similarity to the undesired set, same indexing.
    pub undesired_trace: Vec<f32>,
    /// `‖L − L₀‖₂`.
    pub displacement: f32,
    /// Steps were requested but none changed the latent: the gradient was
    /// zero or too small to move any f32 coordinate.
    pub stationary: bool,
}

/// Gradient descent from `l0` for `cfg.steps` iterations.
pub fn refine_latent(
    l0: &Tensor,
    anchors: &AnchorSets,
    cfg: &SteeringConfig,
) -> Result<SteeringResult, SteeringError> {
    cfg.validate()?;
    anchors.validate(l0.shape())?;
    if cfg.steps > 0 && anchors.is_empty() {
        return Err(SteeringError::NoAnchors);
    }
    let p = prepare(anchors, cfg.similarity);
    let base = l0.data();
    let mut l = base.to_vec();
    let undesired_at = |l: &[f32]| -> Result<f32, SteeringError> {
        let n = latent_norm(l, cfg.similarity)?;
        Ok(mean_similarity(&p.undesired, l, n, cfg.similarity))
    };
    let first = objective_prepared(&l, base, &p, cfg)?;
    if !first.is_finite() {
        return Err(SteeringError::NonFinite { iteration: 0 });
    }
    let mut objective_trace = vec![first];
    let mut undesired_trace = vec![undesired_at(&l)?];
    for iteration in 1..=cfg.steps {
        let mut g = grad_prepared(&l, base, &p, cfg)?;
        if let Some(max) = cfg.grad_clip {
            let gn = norm(&g);
            if gn > max {
                let s = max / gn;
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        for (x, gv) in l.iter_mut().zip(&g) {
            *x -= cfg.lr * gv;
        }
        let obj = objective_prepared(&l, base, &p, cfg)
            .map_err(|e| match e {
                SteeringError::ZeroLatent => SteeringError::NonFinite { iteration },
                other => other,
            })?;
        if !obj.is_finite() || l.iter().any(|v| !v.is_finite()) {
            return Err(SteeringError::NonFinite { iteration });
        }
        objective_trace.push(obj);
        undesired_trace.push(undesired_at(&l)?);
    }
    let latent = Tensor::new(l0.shape().to_vec(), l)?;
    let displacement = latent.sub(l0)?.norm();
    let stationary = cfg.steps > 0 && latent == *l0;
    Ok(SteeringResult {
        latent,
        objective_trace,
        undesired_trace,
        displacement,
        stationary,
    })
}
