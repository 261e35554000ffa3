//! Memorization detection and latent steering for small latent diffusion
//! models.
//!
//! A generation is produced, scanned by content filters, and when a filter
//! fires the initial latent is refined by gradient descent to move away from
//! the offending images before sampling again.

pub mod cli;
pub mod corpus;
pub mod diffusion;
pub mod filters;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod steering;
