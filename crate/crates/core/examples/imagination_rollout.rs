//! One pass of latent imagination on random hidden states: split each
//! stream, roll out three steps per modality, score against the held-out
//! future.
//!
//! `cargo run --release --example imagination_rollout`

use ewm_lab::ewm::{
    bottleneck_project, build_rollout_context, imagination_loss, imagine_rollout, temporal_split, EwmConfig, EwmParams,
    ImaginationMode, Modality, ModalityStream, Phase,
};
use ewm_lab::numerics::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ewm_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 32;
    let cfg = EwmConfig::default();
    let mut store = ParamStore::new();
    let ewm = EwmParams::new(&mut store, cfg.clone(), d, &mut rng)?;
    let g = Graph::with_params(&store);

    let keep = 0.75;
    let splits = Modality::BOTH.map(|m| {
        let h = g.input(Tensor::randn(&[12, d], 1.0, &mut rng));
        let z = bottleneck_project(&g, &ewm, h, m).expect("bottleneck");
        Some(temporal_split(&g, &ModalityStream { modality: m, z, present: true }, keep, Phase::Train).expect("split"))
    });
    for s in splits.iter().flatten() {
        println!("split at keep {keep}: past {} rows, future {} rows", s.past_len, 12 - s.past_len);
    }

    for mode in [ImaginationMode::SelfOnly, ImaginationMode::CrossOnly, ImaginationMode::Cross] {
        let mut rollouts = Vec::new();
        for m in Modality::BOTH {
            let ctx = build_rollout_context(&g, &ewm, m, &splits, mode)?;
            rollouts.push(imagine_rollout(&g, &ewm, m, ctx)?);
        }
        let pairs: Vec<_> = rollouts
            .iter()
            .map(|r| (r, splits[r.modality.index()].as_ref().unwrap().fut.unwrap()))
            .collect();
        let loss = imagination_loss(&g, &pairs, cfg.future_queries)?;
        println!(
            "\n{mode:?}: context rows per step {:?}, loss {:.4}",
            rollouts[0].context_len,
            g.item(loss.loss)
        );
        for (s, (c, e)) in loss.fidelity.cosine.iter().zip(&loss.fidelity.mse).enumerate() {
            println!("  step {}: cosine {c:+.4}  mse {e:.4}", s + 1);
        }
    }
    Ok(())
}
