//! Minimal reverse-mode differentiable computation.
//!
//! Exactly the operation set the detector needs: dense f64 tensors on a
//! per-step tape, an Adam optimizer with a OneCycle schedule, finite-difference
//! gradient verification and a versioned parameter checkpoint format. No
//! broadcasting engine, no GPU, no dynamic shapes beyond the batch dimension.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_FD_STEP};
pub use graph::{concat_rows, DiffError, Graph, Tensor};
pub use optim::{
    adam_step, clip_grad_norm, onecycle_lr, AdamConfig, OptimizerState, Param, ParamStore,
};
