//! Accuracy ceiling of the synthetic world: exact forward filtering with
//! emission tables estimated from a large labelled sample.
//!
//! `cargo run --release --example bayes_ceiling -- [noise] [stay_prob]`

use ewm_lab::worldgen::{Dataset, Episode, GenConfig};

fn emission_tables(eps: &[Episode], cfg: &GenConfig) -> [Vec<Vec<f64>>; 2] {
    let (k, c, l) = (cfg.states, cfg.codebook, cfg.seq_len);
    let mut tables = [vec![vec![1.0; c]; k], vec![vec![1.0; c]; k]];
    for ep in eps {
        for t in 0..l {
            tables[0][ep.latent[t]][ep.video[t] as usize] += 1.0;
            tables[1][ep.latent[(t + cfg.lead_lag).min(l - 1)]][ep.audio[t] as usize] += 1.0;
        }
    }
    for table in &mut tables {
        for row in table.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
    }
    tables
}

/// Posterior over the final state given every observation.
fn filter(
    ep: &Episode,
    cfg: &GenConfig,
    trans: &[Vec<f64>],
    em: &[Vec<Vec<f64>>; 2],
    keep: [bool; 2],
    ratio: f64,
) -> Vec<f64> {
    let (k, l) = (cfg.states, cfg.seq_len);
    let seen = ((ratio * l as f64).floor() as usize).clamp(1, l);
    let mut like = vec![vec![1.0; k]; l];
    for t in 0..seen {
        for s in 0..k {
            if keep[0] {
                like[t][s] *= em[0][s][ep.video[t] as usize];
            }
            if keep[1] {
                like[(t + cfg.lead_lag).min(l - 1)][s] *= em[1][s][ep.audio[t] as usize];
            }
        }
    }
    for (t, &w) in ep.text.iter().enumerate() {
        for s in 0..k {
            if w as usize / cfg.words_per_state != s {
                like[t][s] = 0.0;
            }
        }
    }
    let mut alpha: Vec<f64> = (0..k).map(|s| like[0][s] / k as f64).collect();
    for row in like.iter().skip(1) {
        let mut next = vec![0.0; k];
        for (i, a) in alpha.iter().enumerate() {
            for j in 0..k {
                next[j] += a * trans[i][j];
            }
        }
        let z: f64 = next.iter().zip(row).map(|(a, b)| a * b).sum();
        alpha = next.iter().zip(row).map(|(a, b)| a * b / z).collect();
    }
    alpha
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn main() -> ewm_lab::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let base = GenConfig::default();
    let cfg = GenConfig {
        noise: args.first().copied().unwrap_or(base.noise),
        stay_prob: args.get(1).copied().unwrap_or(base.stay_prob),
        train: 20_000,
        test: 4000,
        ..base
    };
    let data = Dataset::generate(&cfg)?;
    let em = emission_tables(&data.train, &cfg);
    let trans = cfg.transition_matrix();
    println!("noise {} stay {}", cfg.noise, cfg.stay_prob);
    println!("{:>6} {}", "", [1.0, 0.7, 0.5, 0.3, 0.1].map(|r| format!("{r:>7}")).join(""));
    for (name, keep) in [("both", [true, true]), ("video", [true, false]), ("audio", [false, true]), ("text", [false, false])] {
        let row: Vec<String> = [1.0, 0.7, 0.5, 0.3, 0.1]
            .iter()
            .map(|&ratio| {
                let hits = data
                    .test
                    .iter()
                    .filter(|ep| argmax(&filter(ep, &cfg, &trans, &em, keep, ratio)) == ep.label)
                    .count();
                format!("{:>7.4}", hits as f64 / data.test.len() as f64)
            })
            .collect();
        println!("{name:>6} {}", row.join(""));
    }
    Ok(())
}
