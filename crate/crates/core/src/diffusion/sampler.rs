//! Deterministic DDIM (η = 0) sampling and its inversion.
//!
//! Both walk the same strided timestep grid `[s−1, 2s−1, …, T−1]` with
//! `s = T / substeps`; sampling goes down it and finishes at ᾱ = 1, inversion
//! starts at ᾱ = 1 and goes up. The model works in `[−1, 1]`; images outside
//! this module are `[0, 1]`, converted by [`to_unit_image`] and
//! [`from_unit_image`].

use serde::{Deserialize, Serialize};

use super::{DiffusionError, Denoiser, NoiseSchedule};
use crate::numerics::Tensor;

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    fn image_len(&self) -> usize;
    fn predict_noise(&self, x: &[f32], t: usize, cond: usize) -> Result<Vec<f32>, DiffusionError>;
}

impl NoisePredictor for Denoiser {
    fn image_len(&self) -> usize {
        self.config().image_len
    }

    fn predict_noise(&self, x: &[f32], t: usize, cond: usize) -> Result<Vec<f32>, DiffusionError> {
        self.predict(x, t, cond)
    }
}

/// Predicts zero noise everywhere. Sampling with it is a pure rescaling.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub image_len: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn image_len(&self) -> usize {
        self.image_len
    }

    fn predict_noise(&self, x: &[f32], _t: usize, _cond: usize) -> Result<Vec<f32>, DiffusionError> {
        Ok(vec![0.0; x.len()])
    }
}

pub fn ddim_timesteps(steps: usize, substeps: usize) -> Result<Vec<usize>, DiffusionError> {
    if substeps == 0 || steps % substeps != 0 {
        return Err(DiffusionError::Substeps { substeps, steps });
    }
    let stride = steps / substeps;
    Ok((1..=substeps).map(|i| i * stride - 1).collect())
}

fn check_len(z: &Tensor, model: &impl NoisePredictor) -> Result<(), DiffusionError> {
    if z.len() != model.image_len() {
        return Err(DiffusionError::Shape(format!(
            "latent has {} elements, model expects {}",
            z.len(),
            model.image_len()
        )));
    }
    Ok(())
}

/// One DDIM move from signal level `a_from` to `a_to` given a noise estimate.
fn ddim_move(x: &mut [f32], eps: &[f32], a_from: f32, a_to: f32) {
    let (sa_from, sn_from) = (a_from.sqrt(), (1.0 - a_from).sqrt());
    let (sa_to, sn_to) = (a_to.sqrt(), (1.0 - a_to).sqrt());
    for (xv, &e) in x.iter_mut().zip(eps) {
        let x0 = (*xv - sn_from * e) / sa_from;
        *xv = sa_to * x0 + sn_to * e;
    }
}

/// As [`ddim_move`], but the implied clean image is clamped to `[−1, 1]`
/// and the noise estimate re-derived from it.
fn ddim_move_clipped(x: &mut [f32], eps: &[f32], a_from: f32, a_to: f32) {
    let (sa_from, sn_from) = (a_from.sqrt(), (1.0 - a_from).sqrt());
    let (sa_to, sn_to) = (a_to.sqrt(), (1.0 - a_to).sqrt());
    for (xv, &e) in x.iter_mut().zip(eps) {
        let x0 = ((*xv - sn_from * e) / sa_from).clamp(-1.0, 1.0);
        let e = (*xv - sa_from * x0) / sn_from;
        *xv = sa_to * x0 + sn_to * e;
    }
}

/// Sampler options beyond the timestep grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    /// Clamp the predicted clean image to the data range at every step.
    #[serde(default)]
    pub clip_x0: bool,
}

/// Runs the deterministic trajectory from `z_t` (at `t = T−1`) to `z_0`.
/// Output is in model range and has the shape of `z_t`.
pub fn ddim_sample(
    z_t: &Tensor,
    cond: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    substeps: usize,
) -> Result<Tensor, DiffusionError> {
    ddim_sample_with(z_t, cond, model, sched, substeps, SampleOptions::default())
}

pub fn ddim_sample_with(
    z_t: &Tensor,
    cond: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    substeps: usize,
    opts: SampleOptions,
) -> Result<Tensor, DiffusionError> {
    check_len(z_t, model)?;
    let taus = ddim_timesteps(sched.steps(), substeps)?;
    let mut x = z_t.data().to_vec();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let a_prev = if i > 0 { sched.alpha_bar(taus[i - 1]) } else { 1.0 };
        let eps = model.predict_noise(&x, t, cond)?;
        if opts.clip_x0 {
            ddim_move_clipped(&mut x, &eps, sched.alpha_bar(t), a_prev);
        } else {
            ddim_move(&mut x, &eps, sched.alpha_bar(t), a_prev);
        }
    }
    Ok(Tensor::new(z_t.shape().to_vec(), x)?)
}

/// Maps a `[0, 1]` image to the latent whose DDIM trajectory returns to it.
pub fn ddim_invert(
    image: &Tensor,
    cond: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    substeps: usize,
) -> Result<Tensor, DiffusionError> {
    check_len(image, model)?;
    let taus = ddim_timesteps(sched.steps(), substeps)?;
    let mut x = from_unit_image(image)?.into_data();
    for (i, &t) in taus.iter().enumerate() {
        let a_cur = if i > 0 { sched.alpha_bar(taus[i - 1]) } else { 1.0 };
        let eps = model.predict_noise(&x, t, cond)?;
        ddim_move(&mut x, &eps, a_cur, sched.alpha_bar(t));
    }
    Ok(Tensor::new(image.shape().to_vec(), x)?)
}

/// Model range `[−1, 1]` to image range `[0, 1]`, clamping.
pub fn to_unit_image(x: &Tensor) -> Result<Tensor, DiffusionError> {
    Ok(x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))?)
}

/// Image range `[0, 1]` to model range `[−1, 1]`.
pub fn from_unit_image(x: &Tensor) -> Result<Tensor, DiffusionError> {
    Ok(x.map(|v| 2.0 * v - 1.0)?)
}

/// Samples and converts to a `[0, 1]` image.
pub fn generate_image(
    z_t: &Tensor,
    cond: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    substeps: usize,
) -> Result<Tensor, DiffusionError> {
    generate_image_with(z_t, cond, model, sched, substeps, SampleOptions::default())
}

pub fn generate_image_with(
    z_t: &Tensor,
    cond: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    substeps: usize,
    opts: SampleOptions,
) -> Result<Tensor, DiffusionError> {
    to_unit_image(&ddim_sample_with(z_t, cond, model, sched, substeps, opts)?)
}
