//! Robustness to a missing modality with and without modality dropout in
//! training.
//!
//! `cargo run --release --example missing_modality -- [steps] [threads]`

use ewm_lab::harness::{run_variants, scenario_grid, RunConfig, SweepAxis};
use ewm_lab::worldgen::Dataset;

fn main() -> ewm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut base = RunConfig::default();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        base.steps = steps;
    }
    let threads = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = Dataset::generate(&base.data)?;
    let scenarios = scenario_grid(&[1.0]);
    let outcomes = run_variants(&SweepAxis::ModalityDropout.variants(&base), &data, &scenarios, threads)?;
    for o in &outcomes {
        let accs: Vec<f64> = o.eval.iter().map(|m| m.accuracy).collect();
        let worst_single = accs[1].min(accs[2]);
        println!(
            "p_drop {:<5} full {:.4} no video {:.4} no audio {:.4} gap {:.2} pts",
            o.label,
            accs[0],
            accs[1],
            accs[2],
            100.0 * (accs[0] - worst_single)
        );
    }
    Ok(())
}
