//! Desk-scale emotion world model: predictive latent imagination over
//! multimodal token streams, belief aggregation, and belief injection into a
//! small autoregressive transformer, plus a synthetic affect world and an
//! ablation harness.
//!
//! Module map:
//!
//! - [`numerics`]: tape autodiff, layers, AdamW, finite-difference oracle
//! - [`backbone`]: toy "thinker" transformer with LoRA and an LM head
//! - [`worldgen`]: lead-lag hidden-Markov affect world and episode files
//! - [`ewm`]: bottleneck projection, temporal splitting, multi-step imagination
//! - [`mama`]: modality-aware belief aggregation with boundary residual
//! - [`inject`]: up-projection, keep mask and interleaved belief injection
//! - [`harness`]: training step, evaluation, ablations, sweeps and CLI
//!
//! See the crate's `examples/` directory for one runnable program per area.

pub mod backbone;
pub mod error;
pub mod ewm;
pub mod harness;
pub mod inject;
pub mod mama;
pub mod numerics;
pub mod worldgen;

pub use error::{Error, Result};
