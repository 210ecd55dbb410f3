//! Small dense-network toolkit: MLPs with exact reverse-mode gradients,
//! Adam, soft target updates, Gumbel-softmax sampling and JSON checkpoints.
//!
//! Everything is `f64`. Batches are row-major `ndarray` matrices, one sample
//! per row.

mod adam;
pub mod checkpoint;
mod gumbel;
mod mlp;

use thiserror::Error;

pub use adam::{adam_update, soft_update, AdamState};
pub use checkpoint::{load_params, save_params, CheckpointBundle, CheckpointMetadata, NetworkDoc};
pub use gumbel::{
    argmax, gumbel_softmax, gumbel_softmax_backward, gumbel_softmax_with_noise, sample_gumbel, GumbelSample,
};
pub use mlp::{
    softmax, softmax_rows, softmax_rows_backward, Dense, ForwardCache, HiddenActivation, Mlp, MlpSpec,
    OutputActivation, ParamSet,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient contains a non-finite value")]
    NonFiniteGradient,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unreadable or incompatible checkpoint: {0}")]
    FormatVersionMismatch(String),
}
