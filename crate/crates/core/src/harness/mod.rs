//! Training, evaluation, ablations and the command line.

mod cli;
mod config;
mod eval;
mod experiments;
mod model;
mod train;

pub use cli::cli_main;
pub use config::{BackboneConfig, BackboneMode, BeliefSource, Components, OptimConfig, RunConfig};
pub use eval::{
    accuracy, dump_attention, evaluate, imagination_fidelity, scenario_grid, weighted_f1, EvalMetrics, Scenario,
};
pub use experiments::*;
pub use model::{BeliefOutput, Model};
pub use train::{fit, step_loss, train_step, training_rng, write_training_csv, MetricsRecord, StepLoss};
