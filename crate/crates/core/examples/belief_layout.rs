//! Where belief tokens land in the backbone sequence, before and after a
//! keep-ratio truncation.
//!
//! `cargo run --release --example belief_layout -- [keep] [single|interleaved]`

use ewm_lab::backbone::Role;
use ewm_lab::harness::{Model, RunConfig};
use ewm_lab::inject::{answer_labels, apply_keep_mask, interleave_inject, InjectPositions};
use ewm_lab::numerics::{Graph, Tensor};
use ewm_lab::worldgen::{Dataset, GenConfig};

fn main() -> ewm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let keep: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let positions = match args.next().as_deref() {
        Some("single") => InjectPositions::Single,
        _ => InjectPositions::Interleaved,
    };
    let mut cfg = RunConfig::default();
    cfg.data = GenConfig { seq_len: 6, train: 1, val: 1, test: 1, ..cfg.data };
    let data = Dataset::generate(&cfg.data)?;
    let model = Model::new(cfg)?;
    let ep = &data.train[0];
    let seq = model.sequence(ep, [true, true], Some(ep.label))?;

    let g = Graph::inference(&model.store);
    let emb = model.thinker.embed(&g, &seq.tokens)?;
    let (rows, plan) = apply_keep_mask(&g, emb, &seq.roles, keep)?;
    let roles: Vec<Role> = plan.kept.iter().map(|&i| seq.roles[i]).collect();
    let all_labels = answer_labels(&seq);
    let labels: Vec<i64> = plan.kept.iter().map(|&i| all_labels[i]).collect();
    let beliefs = g.input(Tensor::zeros(&[8, model.config.backbone.d]));
    let aug = interleave_inject(&g, rows, &roles, &labels, Some(beliefs), positions)?;

    println!("{} tokens, keep {keep} leaves {}, plus 8 beliefs = {}", seq.len(), plan.kept.len(), aug.len());
    print!("{}", aug.layout_dump());
    Ok(())
}
