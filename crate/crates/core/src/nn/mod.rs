//! Minimal deterministic dense-network substrate.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod param;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport, Stencil};
pub use layers::{sigmoid, Activation, Dense, DenseCache, EmbeddingTable, Mlp, MlpCache};
pub use matrix::{dot, Matrix};
pub use param::{ParamId, ParamStore, Parameter};
