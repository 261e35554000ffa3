//! Noise-prediction training: forward noising, the squared-residual loss and
//! mini-batch gradient steps.

use serde::{Deserialize, Serialize};

use super::{DiffusionError, Denoiser, NoiseSchedule};
use crate::corpus::Corpus;
use crate::numerics::{split_seed, RngState, Tensor};

/// `√ᾱ_t · x + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(
    x: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    Ok(noise_with(x, a, eps)?)
}

/// Forward noising at an explicit signal fraction `alpha_bar ∈ [0, 1]`.
pub fn noise_with(x: &Tensor, alpha_bar: f32, eps: &Tensor) -> Result<Tensor, crate::numerics::NumericsError> {
    x.lin_comb(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Mean squared error between `eps` and the model's prediction on the
/// noised input.
pub fn loss(
    x: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: usize,
    model: &Denoiser,
    sched: &NoiseSchedule,
) -> Result<f32, DiffusionError> {
    let xt = forward_noise(x, t, eps, sched)?;
    if xt.len() != model.config().image_len {
        return Err(DiffusionError::Shape(format!(
            "image has {} elements, model expects {}",
            xt.len(),
            model.config().image_len
        )));
    }
    let pred = model.predict(xt.data(), t, cond)?;
    Ok(mse(&pred, eps.data()))
}

pub(crate) fn mse(pred: &[f32], target: &[f32]) -> f32 {
    let ss: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &e)| {
            let d = f64::from(p) - f64::from(e);
            d * d
        })
        .sum();
    (ss / pred.len() as f64) as f32
}

/// One mini-batch of training examples, images already in model range.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `len × image_len` clean images.
    pub x0: Vec<f32>,
    /// `len × image_len` noise draws.
    pub eps: Vec<f32>,
    pub ts: Vec<usize>,
    pub conds: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Parameter update rule. Adam keeps first/second moment buffers per
/// parameter buffer.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        step: u32,
    },
}

const ADAM_B1: f32 = 0.9;
const ADAM_B2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Denoiser) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f32>> =
                    model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
                Self::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    step: 0,
                }
            }
        }
    }

    fn apply(&mut self, model: &mut Denoiser, grads: &[Vec<f32>], lr: f32) {
        match self {
            Self::Sgd => {
                for (p, g) in model.params_mut().into_iter().zip(grads) {
                    for (w, &gv) in p.iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
            }
            Self::Adam { m, v, step } => {
                *step += 1;
                let bc1 = 1.0 - ADAM_B1.powi(*step as i32);
                let bc2 = 1.0 - ADAM_B2.powi(*step as i32);
                for (((p, g), mb), vb) in model.params_mut().into_iter().zip(grads).zip(m).zip(v) {
                    for i in 0..p.len() {
                        let gv = g[i];
                        mb[i] = ADAM_B1 * mb[i] + (1.0 - ADAM_B1) * gv;
                        vb[i] = ADAM_B2 * vb[i] + (1.0 - ADAM_B2) * gv * gv;
                        let mhat = mb[i] / bc1;
                        let vhat = vb[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Loss and exact parameter gradients for one batch, without updating.
pub fn batch_loss_and_grads(
    batch: &Batch,
    model: &Denoiser,
    sched: &NoiseSchedule,
) -> Result<(f32, Vec<Vec<f32>>), DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::Shape("empty batch".into()));
    }
    let d = model.config().image_len;
    if batch.x0.len() != batch.len() * d || batch.eps.len() != batch.len() * d {
        return Err(DiffusionError::Shape("batch buffers do not match image_len".into()));
    }
    let mut xt = Vec::with_capacity(batch.x0.len());
    for (b, &t) in batch.ts.iter().enumerate() {
        sched.check_t(t)?;
        let a = sched.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let rows = batch.x0[b * d..(b + 1) * d].iter().zip(&batch.eps[b * d..(b + 1) * d]);
        xt.extend(rows.map(|(&x, &e)| sa * x + sn * e));
    }
    let (pred, cache) = model.forward(&xt, &batch.ts, &batch.conds)?;
    let loss = mse(&pred, &batch.eps);
    let scale = 2.0 / pred.len() as f32;
    let grad_out: Vec<f32> = pred
        .iter()
        .zip(&batch.eps)
        .map(|(&p, &e)| scale * (p - e))
        .collect();
    Ok((loss, model.backward(&cache, &grad_out)))
}

/// One gradient step on `batch`. Returns the pre-update loss.
pub fn backprop_step(
    batch: &Batch,
    model: &mut Denoiser,
    opt: &mut Optimizer,
    sched: &NoiseSchedule,
    lr: f32,
) -> Result<f32, DiffusionError> {
    let (loss, grads) = batch_loss_and_grads(batch, model, sched)?;
    if !loss.is_finite() {
        return Err(DiffusionError::NonFiniteLoss {
            context: format!("batch of {} at timesteps {:?}", batch.len(), batch.ts),
        });
    }
    if let Some((i, _)) = grads
        .iter()
        .enumerate()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(DiffusionError::NonFiniteLoss {
            context: format!("non-finite gradient in parameter buffer {i}"),
        });
    }
    opt.apply(model, &grads, lr);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Number of real conditions in the vocabulary.
    pub condition_count: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Probability of replacing a sample's condition with the null condition.
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f32,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr / 100` over the whole run.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f32, step: usize, total: usize) -> f32 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let floor = f64::from(base) * 0.01;
                let frac = step as f64 / total.max(1) as f64;
                let w = 0.5 * (1.0 + libm::cos(std::f64::consts::PI * frac));
                (floor + (f64::from(base) - floor) * w) as f32
            }
        }
    }
}

fn default_cond_dropout() -> f32 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self, corpus: &Corpus) -> Result<(), DiffusionError> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(DiffusionError::Config(
                "lr, batch_size and epochs must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 || self.condition_count == 0 {
            return Err(DiffusionError::Config(
                "image extents and condition_count must be positive".into(),
            ));
        }
        if (self.width, self.height) != (corpus.width(), corpus.height()) {
            return Err(DiffusionError::Config(format!(
                "train config is {}x{}, corpus is {}x{}",
                self.width,
                self.height,
                corpus.width(),
                corpus.height()
            )));
        }
        if corpus.condition_count() > self.condition_count {
            return Err(DiffusionError::Config(format!(
                "corpus uses {} conditions, config allows {}",
                corpus.condition_count(),
                self.condition_count
            )));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(DiffusionError::Config("cond_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f32,
}

/// Builds the batches of one epoch. Timesteps, noise and condition dropout
/// come from a stream derived from `(seed, epoch)`.
pub fn epoch_batches(
    corpus: &Corpus,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    null_cond: usize,
    epoch: usize,
) -> Vec<Batch> {
    let order = corpus.epoch_order(epoch as u64, cfg.seed);
    let mut rng = RngState::new(split_seed(cfg.seed, 0x7EA1_0000 + epoch as u64));
    let records = corpus.records();
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let mut batch = Batch {
                x0: Vec::new(),
                eps: Vec::new(),
                ts: Vec::with_capacity(chunk.len()),
                conds: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let rec = &records[i];
                batch.x0.extend(rec.pixels.data().iter().map(|&p| 2.0 * p - 1.0));
                batch
                    .eps
                    .extend((0..rec.pixels.len()).map(|_| rng.standard_normal() as f32));
                batch.ts.push(rng.below(sched.steps()));
                let drop = rng.uniform() < f64::from(cfg.cond_dropout);
                batch.conds.push(if drop { null_cond } else { rec.condition });
            }
            batch
        })
        .collect()
}

/// Trains a freshly initialised denoiser on `corpus`.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    arch: super::DenoiserConfig,
    sched: &NoiseSchedule,
    mut on_epoch: impl FnMut(EpochLoss),
) -> Result<(Denoiser, Vec<EpochLoss>), DiffusionError> {
    cfg.validate(corpus)?;
    if arch.image_len != cfg.width * cfg.height || arch.cond_count != cfg.condition_count {
        return Err(DiffusionError::Config(
            "architecture does not match train config".into(),
        ));
    }
    let mut init_rng = RngState::new(split_seed(cfg.seed, 0x1417));
    let mut model = Denoiser::new(arch, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, &model);
    let null = model.config().null_condition();
    let mut history = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = corpus.epoch_len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in epoch_batches(corpus, cfg, sched, null, epoch) {
            let lr = cfg.lr_schedule.at(cfg.lr, step, total_steps);
            step += 1;
            let l = backprop_step(&batch, &mut model, &mut opt, sched, lr).map_err(|e| match e {
                DiffusionError::NonFiniteLoss { context } => DiffusionError::NonFiniteLoss {
                    context: format!("epoch {epoch}: {context}"),
                },
                other => other,
            })?;
            total += f64::from(l) * batch.len() as f64;
            count += batch.len();
        }
        let rec = EpochLoss {
            epoch,
            loss: (total / count as f64) as f32,
        };
        on_epoch(rec);
        history.push(rec);
    }
    Ok((model, history))
}
