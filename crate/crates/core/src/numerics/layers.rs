use rand::Rng;

use super::graph::{AttnMask, Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), &[d_in, d_out], Init::FanIn, true, rng)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), &[d_out], Init::Zeros, false, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, g.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), &[d], Init::Constant(1.0), false, rng)?,
            beta: store.register(format!("{name}.beta"), &[d], Init::Zeros, false, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), LN_EPS)
    }
}

/// Two-layer GELU MLP with hidden width `4 d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = g.gelu(self.up.forward(g, x)?)?;
        self.down.forward(g, h)
    }
}

/// One Pre-LN cross-attention layer: `q + MHA(LN(q), LN(mem))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct CrossAttnLayer {
    pub ln_q: LayerNorm,
    pub ln_mem: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ff: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttnLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d, rng)?,
            ln_mem: LayerNorm::new(store, &format!("{name}.ln_mem"), d, rng)?,
            wq: Linear::new(store, &format!("{name}.wq"), d, d, true, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d, true, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d, true, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, rng)?,
        })
    }

    /// Returns the updated queries and the attention node (for its weights).
    pub fn forward(&self, g: &Graph, queries: Var, memory: Var, heads: usize) -> Result<(Var, Var)> {
        let qn = self.ln_q.forward(g, queries)?;
        let mn = self.ln_mem.forward(g, memory)?;
        let q = self.wq.forward(g, qn)?;
        let k = self.wk.forward(g, mn)?;
        let v = self.wv.forward(g, mn)?;
        let att = g.attention(q, k, v, heads, &AttnMask::None)?;
        let h = g.add(queries, self.wo.forward(g, att)?)?;
        let ff = self.ffn.forward(g, self.ln_ff.forward(g, h)?)?;
        Ok((g.add(h, ff)?, att))
    }
}

/// Stack of [`CrossAttnLayer`]s sharing one head count.
#[derive(Clone, Debug)]
pub struct CrossAttnBlock {
    pub layers: Vec<CrossAttnLayer>,
    pub heads: usize,
}

/// Output of [`CrossAttnBlock::forward`].
pub struct CrossAttnOutput {
    pub out: Var,
    /// Attention nodes, one per layer; see [`Graph::attention_probs`].
    pub attention: Vec<Var>,
}

impl CrossAttnBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {d} not divisible by {heads} heads"
            )));
        }
        let layers = (0..n_layers)
            .map(|i| CrossAttnLayer::new(store, &format!("{name}.layer{i}"), d, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, heads })
    }

    /// Attend `queries` to the row-concatenation of `memory` parts.
    pub fn forward(&self, g: &Graph, queries: Var, memory: &[Var]) -> Result<CrossAttnOutput> {
        let memory = match memory {
            [] => return Err(Error::Contract("cross-attention memory is empty".into())),
            [one] => *one,
            parts => g.concat_rows(parts)?,
        };
        let mut x = queries;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, att) = layer.forward(g, x, memory, self.heads)?;
            x = y;
            attention.push(att);
        }
        Ok(CrossAttnOutput { out: x, attention })
    }

    /// Every parameter id of the block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            for ln in [&l.ln_q, &l.ln_mem, &l.ln_ff] {
                ids.extend([ln.gamma, ln.beta]);
            }
            for lin in [&l.wq, &l.wk, &l.wv, &l.wo, &l.ffn.up, &l.ffn.down] {
                ids.push(lin.weight);
                ids.extend(lin.bias);
            }
        }
        ids
    }
}
