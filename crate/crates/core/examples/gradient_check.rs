//! Reverse-mode gradients of a cross-attention block against central
//! differences.
//!
//! `cargo run --release --example gradient_check`

use ewm_lab::numerics::{finite_difference_check, CrossAttnBlock, Graph, Init, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ewm_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let block = CrossAttnBlock::new(&mut store, "block", 8, 2, 2, &mut rng)?;
    let queries = store.register("queries", &[3, 8], Init::Gaussian { std: 1.0 }, true, &mut rng)?;
    let memory = store.register("memory", &[5, 8], Init::Gaussian { std: 1.0 }, true, &mut rng)?;
    let target = Tensor::randn(&[3, 8], 1.0, &mut rng);

    // A generic point: fresh inits sit where the loss is nearly linear.
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
    }
    // Key biases cannot change a softmax, so their gradient is exactly zero.
    let checked: Vec<ParamId> = ids.iter().copied().filter(|&id| !store.get(id).name.ends_with("wk.bias")).collect();

    let loss = |g: &Graph| {
        let out = block.forward(g, g.param(queries), &[g.param(memory)])?;
        let t = g.constant(target.clone())?;
        g.mse(out.out, t)
    };
    let err = finite_difference_check(&mut store, &checked, 1e-4, loss)?;
    let coords: usize = checked.iter().map(|&id| store.value(id).len()).sum();
    println!("{} tensors, {coords} coordinates, max relative error {err:.2e}", checked.len());
    Ok(())
}
