//! Dense f32 arithmetic, seedable randomness and the GEMM kernels shared by
//! the denoiser.

mod gemm;
mod rng;
mod tensor;

pub use gemm::{matmul, matmul_at_b, matmul_a_bt};
pub use rng::{gaussian, split_seed, RngState};
pub use tensor::{cosine_sim, l2_normed, Tensor, LSTN_MAGIC, LSTN_VERSION};

pub(crate) use tensor::{dot, norm};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape {0:?} has a zero or missing extent")]
    EmptyShape(Vec<usize>),
    #[error("shape {shape:?} does not match buffer length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
