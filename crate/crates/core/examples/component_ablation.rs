//! Component rows a to f, each adding one piece of the pipeline, plus the
//! random and pooled belief variants.
//!
//! `cargo run --release --example component_ablation -- [steps] [threads]`

use ewm_lab::harness::{ablation_variants, run_variants, RunConfig, Scenario};
use ewm_lab::worldgen::Dataset;

fn main() -> ewm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut base = RunConfig::default();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        base.steps = steps;
    }
    let threads = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = Dataset::generate(&base.data)?;
    let outcomes = run_variants(&ablation_variants(&base), &data, &[Scenario::FULL], threads)?;
    let reference = outcomes[0].accuracy();
    for o in &outcomes {
        println!(
            "{:<16} accuracy {:.4} ({:+.2} pts vs row a)",
            o.label,
            o.accuracy(),
            100.0 * (o.accuracy() - reference)
        );
    }
    Ok(())
}
