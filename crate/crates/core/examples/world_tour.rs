//! Sample the synthetic affect world and look at one episode.
//!
//! `cargo run --release --example world_tour -- [seed]`

use ewm_lab::worldgen::{stationary_distribution, Dataset, GenConfig};

fn main() -> ewm_lab::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = GenConfig { seed, train: 200, val: 20, test: 50, ..GenConfig::default() };
    let data = Dataset::generate(&cfg)?;
    let t = data.process.transition();
    println!("{} states, stay {}, noise {}, audio leads video by {}", cfg.states, cfg.stay_prob, cfg.noise, cfg.lead_lag);
    for row in t {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.3}")).collect();
        println!("  [{}]", cells.join(" "));
    }
    println!("stationary {:?}", stationary_distribution(t).iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());

    let ep = &data.train[0];
    println!("\nepisode seed {} label {}", ep.seed, ep.label);
    println!("latent {:?}", ep.latent);
    println!("video  {:?}", ep.video);
    println!("audio  {:?}", ep.audio);
    println!("text   {:?}", ep.text);
    for s in 0..cfg.states {
        let (v, a) = data.process.prototype_codes(s);
        println!("state {s}: video prototype {v:>2}, audio prototype {a:>2}");
    }

    let mut counts = vec![0usize; cfg.states];
    for e in &data.train {
        counts[e.label] += 1;
    }
    println!("\ntrain label counts {counts:?}");
    Ok(())
}
