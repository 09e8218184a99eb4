//! Turn attention tensors recorded from a text-to-image diffusion model into
//! binary object masks, and evaluate them.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor_io`]: the on-disk tensor, mask, and manifest formats.
//! - [`attention`]: loading attention bundles and aggregating them over
//!   timesteps and layers.
//! - [`cut`]: the graph-cut mask generator (seeds, objectness, coherence,
//!   max-flow, post-processing).
//! - [`inversion`]: deterministic forward/reverse diffusion steps with
//!   pluggable noise predictors.
//! - [`decoder`]: a small per-pixel segment decoder trained with Adam.
//! - [`eval`]: saliency metrics, localization, and geometry statistics.
//! - [`fixtures`]: procedural scenes with known ground truth.
//! - [`pipeline`]: the per-manifest driver used by the command-line tool.

pub mod attention;
pub mod config;
pub mod cut;
pub mod decoder;
pub mod eval;
pub mod fixtures;
pub mod inversion;
pub mod pipeline;
pub mod resize;
pub mod rng;
pub mod tensor_io;

pub use tensor_io::{MaskImage, RgbImage, Tensor};
