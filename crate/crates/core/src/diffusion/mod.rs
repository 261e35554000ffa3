//! Toy conditional DDPM: linear noise schedule, MLP noise predictor,
//! training and deterministic DDIM sampling / inversion.

mod checkpoint;
mod model;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_MANIFEST};
pub use model::{time_embedding, Denoiser, DenoiserConfig, ForwardCache, Linear};
pub use sampler::{
    ddim_invert, ddim_sample, ddim_sample_with, ddim_timesteps, from_unit_image, generate_image,
    generate_image_with, to_unit_image, NoisePredictor, SampleOptions, ZeroPredictor,
};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use train::{
    backprop_step, batch_loss_and_grads, epoch_batches, forward_noise, loss, noise_with, train,
    Batch, EpochLoss, LrSchedule, Optimizer, OptimizerKind, TrainConfig,
};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} out of range for a {steps}-step schedule")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("condition {cond} outside vocabulary of {vocab} (+ null)")]
    UnknownCondition { cond: usize, vocab: usize },
    #[error("substeps {substeps} must be nonzero and divide {steps}")]
    Substeps { substeps: usize, steps: usize },
    #[error("non-finite loss: {context}")]
    NonFiniteLoss { context: String },
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
