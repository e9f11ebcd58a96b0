//! Train briefly, then show how each belief query spreads its attention over
//! video and audio imagination memory.
//!
//! `cargo run --release --example attention_mass -- [steps]`

use ewm_lab::ewm::Phase;
use ewm_lab::harness::{fit, Model, RunConfig};
use ewm_lab::mama::modality_mass;
use ewm_lab::numerics::Graph;
use ewm_lab::worldgen::Dataset;

fn main() -> ewm_lab::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let data = Dataset::generate(&cfg.data)?;
    let mut model = Model::new(cfg)?;
    fit(&mut model, &data.train)?;

    let ep = &data.test[0];
    let seq = model.sequence(ep, [true, true], None)?;
    let g = Graph::inference(&model.store);
    let hidden = model.thinker.forward(&g, &seq)?;
    let out = model.beliefs(&g, &hidden, [true, true], 1.0, Phase::Infer)?;
    let (state, bank) = out.aggregation.as_ref().expect("imagined beliefs");
    println!("{} beliefs over {} memory slots (label {})", state.attention.rows(), bank.slots.len(), ep.label);
    for (b, [v, a]) in modality_mass(state, bank).into_iter().enumerate() {
        let bar = |x: f64| "#".repeat((x * 30.0).round() as usize);
        println!("belief {b}: video {v:.3} {:<30} audio {a:.3} {}", bar(v), bar(a));
    }
    Ok(())
}
