//! Rollout depth against downstream accuracy and per-step fidelity on
//! held-out episodes.
//!
//! `cargo run --release --example rollout_depth -- [steps] [threads]`

use ewm_lab::harness::{run_variants, RunConfig, SweepAxis};
use ewm_lab::worldgen::Dataset;

fn main() -> ewm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut base = RunConfig::default();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        base.steps = steps;
    }
    let threads = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = Dataset::generate(&base.data)?;
    let axis = SweepAxis::RolloutSteps;
    let outcomes = run_variants(&axis.variants(&base), &data, &axis.scenarios(&base), threads)?;
    for o in &outcomes {
        let cos: Vec<String> = o.fidelity.cosine.iter().map(|c| format!("{c:.3}")).collect();
        println!("S={} accuracy {:.4} cosine by step [{}]", o.label, o.accuracy(), cos.join(", "));
    }
    Ok(())
}
