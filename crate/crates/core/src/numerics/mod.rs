//! Differentiable dense arrays, layers and the AdamW optimizer.
//!
//! Everything is `f64` and single-threaded. Operations live on [`Graph`];
//! parameters live in a [`ParamStore`] and are bound into a graph on use.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{
    adaptive_avg_pool_1d, gelu, pool_bins, AttnMask, Gradients, Graph, Var, IGNORE_INDEX,
};
pub use layers::{CrossAttnBlock, CrossAttnLayer, CrossAttnOutput, FeedForward, LayerNorm, Linear, LN_EPS};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Denominator floor used by the cosine alignment loss.
pub const COSINE_EPS: f64 = 1e-12;

/// `MSE(pred, target)`; detach `target` beforehand when it must not learn.
pub fn mse_loss(g: &Graph, pred: Var, target: Var) -> crate::Result<Var> {
    g.mse(pred, target)
}

/// Mean over rows of `0.5 * (1 - cos)`.
pub fn cosine_alignment_loss(g: &Graph, pred: Var, target: Var) -> crate::Result<Var> {
    g.cosine_alignment(pred, target, COSINE_EPS)
}
