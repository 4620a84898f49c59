//! Desk-scale multi-dataset 3D object detection with multi-stage prompting.
//!
//! The crate trains a small voxel detector jointly on several synthetic
//! LiDAR-like datasets and injects per-dataset priors ("prompts") at three
//! stages of the pipeline:
//!
//! - **Voxelization** — mean-shifted batch normalization blends the batch-wide
//!   feature mean with each frame's instance mean ([`prompts::MsbnLayer`]).
//! - **Backbone** — a binary BEV range mask derived from the dataset's point
//!   range is concatenated before every 2D convolution
//!   ([`prompts::RangeMask`]).
//! - **Head** — an object-conditional residual, generated from the RoI feature
//!   behind a stop-gradient and shaped by a dataset discriminator, is added
//!   back onto the RoI feature ([`prompts::OcrlHead`]).
//!
//! Each mechanism toggles independently; with all three off the detector is a
//! plain voxel/BEV/anchor baseline. Because the prompts are computed from
//! dataset attributes (point range, the frame itself) rather than learned
//! per-dataset parameters, a trained model can run zero-shot on a dataset it
//! never saw by supplying that dataset's range as the mask prompt.
//!
//! Module map:
//! - [`synthdata`] — synthetic multi-dataset scene generation and dataset-level
//!   transforms (range alignment, statistical normalization).
//! - [`diffnum`] — minimal reverse-mode autodiff, Adam, OneCycle, gradient
//!   checking.
//! - [`geometry`] — voxelization, BEV scatter, axis-aligned IoU, anchor
//!   encode/decode, NMS.
//! - [`prompts`] — the three prompting mechanisms.
//! - [`detector`] — the toy two-stage detector, loss assembly and training.
//! - [`evalkit`] — AP over 40 recall positions, report consolidation,
//!   size-distribution statistics.
//! - [`experiment`] — reproducible experiment driver behind the CLI.

pub mod detector;
pub mod diffnum;
pub mod evalkit;
pub mod experiment;
pub mod geometry;
pub mod prompts;
pub mod synthdata;
