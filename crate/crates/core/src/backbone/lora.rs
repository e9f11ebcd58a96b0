use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Var};

/// Attention projection an adapter is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

/// Low-rank update `(alpha / r) * x A^T B^T` with `A: [r x d_in]`, `B: [d_out x r]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub target: Projection,
    pub rank: usize,
    pub alpha: f64,
    pub a: ParamId,
    pub b: ParamId,
}

impl LoraAdapter {
    /// `B` starts at zero so the adapted projection equals the base one.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        target: Projection,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let name = format!("{prefix}.lora_{}", target.name());
        let a = store.register(
            format!("{name}.a"),
            &[rank, d_in],
            Init::Gaussian {
                std: 1.0 / (d_in as f64).sqrt(),
            },
            true,
            rng,
        )?;
        let b = store.register(format!("{name}.b"), &[d_out, rank], Init::Zeros, true, rng)?;
        Ok(Self {
            target,
            rank,
            alpha,
            a,
            b,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `base_out + (alpha / r) * (x A^T) B^T`.
pub fn apply_lora(g: &Graph, base_out: Var, x: Var, adapter: &LoraAdapter) -> Result<Var> {
    let down = g.matmul_bt(x, g.param(adapter.a))?;
    let up = g.matmul_bt(down, g.param(adapter.b))?;
    if g.shape(up) != g.shape(base_out) {
        return Err(Error::Shape {
            op: "apply_lora",
            lhs: g.shape(base_out),
            rhs: g.shape(up),
        });
    }
    g.add(base_out, g.scale(up, adapter.scale())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adapter(store: &mut ParamStore, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> LoraAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LoraAdapter::new(store, "t", Projection::Q, d_in, d_out, rank, alpha, &mut rng).unwrap()
    }

    #[test]
    fn zero_b_returns_base_output() {
        let mut store = ParamStore::new();
        let ad = adapter(&mut store, 3, 3, 2, 4.0);
        let g = Graph::with_params(&store);
        let base = g.input(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let x = g.input(Tensor::new(vec![2, 3], vec![0.3, 0.1, -0.2, 0.0, 2.0, 1.0]).unwrap());
        let out = apply_lora(&g, base, x, &ad).unwrap();
        assert_eq!(*g.value(out), *g.value(base));
    }

    #[test]
    fn rank16_alpha32_scales_by_two() {
        let mut store = ParamStore::new();
        assert_eq!(adapter(&mut store, 4, 4, 16, 32.0).scale(), 2.0);
    }

    #[test]
    fn rank_one_update_matches_outer_product() {
        let mut store = ParamStore::new();
        let ad = adapter(&mut store, 2, 2, 1, 3.0);
        *store.value_mut(ad.a) = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        *store.value_mut(ad.b) = Tensor::new(vec![2, 1], vec![2.0, 0.25]).unwrap();
        let g = Graph::with_params(&store);
        let base = g.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let x = g.input(Tensor::new(vec![1, 2], vec![4.0, 1.0]).unwrap());
        let out = apply_lora(&g, base, x, &ad).unwrap();
        // x.a = 4*0.5 - 1 = 1; update = 3 * 1 * b = [6, 0.75]
        let expected = [1.0 + 6.0, 1.0 + 0.75];
        for (o, e) in g.value(out).data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }
}
