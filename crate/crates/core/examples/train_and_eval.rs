//! Train the default desk configuration and evaluate it across the
//! modality and keep-ratio grid.
//!
//! `cargo run --release --example train_and_eval -- [steps] [seed]`

use ewm_lab::harness::{evaluate, fit, scenario_grid, Model, RunConfig};
use ewm_lab::worldgen::Dataset;

fn main() -> ewm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        cfg.steps = steps;
    }
    cfg.seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = Dataset::generate(&cfg.data)?;
    let mut model = Model::new(cfg.clone())?;
    println!("config {} trainable tensors {}", cfg.hash(), model.trainable().len());

    let records = fit(&mut model, &data.train)?;
    for r in records.iter().step_by((records.len() / 8).max(1)) {
        let img = r.loss_imagine.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("step {:>5} lr {:.2e} lm {:.4} imagine {img}", r.step, r.lr, r.loss_lm);
    }
    println!();
    for scenario in scenario_grid(&cfg.eval_keep_ratios) {
        let m = evaluate(&model, &data.test, scenario)?;
        println!("{:<14} accuracy {:.4} weighted F1 {:.4}", scenario.name(), m.accuracy, m.weighted_f1);
    }
    Ok(())
}
