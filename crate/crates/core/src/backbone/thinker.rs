use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{apply_lora, LoraAdapter, Projection};
use super::template::{Role, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, FeedForward, Graph, Init, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinkerConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// 0 disables the adapters.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ThinkerConfig {
    pub fn desk(vocab: usize) -> Self {
        Self {
            vocab,
            d: 32,
            layers: 2,
            heads: 4,
            max_seq_len: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % (2 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "thinker width {} not divisible into even-width {} heads",
                self.d, self.heads
            )));
        }
        if self.vocab == 0 || self.layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("thinker sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Hidden states with the role tag of each row.
pub struct HiddenStates {
    pub h: Var,
    pub roles: Vec<Role>,
}

impl HiddenStates {
    /// Rows tagged `role` (e.g. `H_v`, `H_a`), or `None` if the role is absent.
    pub fn extract(&self, g: &Graph, role: Role) -> Result<Option<Var>> {
        let idx: Vec<usize> = (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        g.gather_rows(self.h, &idx).map(Some)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    proj: [Linear; 4],
    lora: Vec<LoraAdapter>,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

impl Block {
    fn project(&self, g: &Graph, which: Projection, x: Var) -> Result<Var> {
        let i = Projection::ALL.iter().position(|p| *p == which).expect("projection");
        let base = self.proj[i].forward(g, x)?;
        match self.lora.iter().find(|a| a.target == which) {
            Some(adapter) => apply_lora(g, base, x, adapter),
            None => Ok(base),
        }
    }
}

/// Rotary position tables for `l` rows: `x' = x * cos + (x @ rot) * sin`,
/// rotating adjacent pairs inside each head.
struct Rotary {
    cos: Tensor,
    sin: Tensor,
    rot: Tensor,
}

impl Rotary {
    fn new(l: usize, d: usize, heads: usize) -> Self {
        let dh = d / heads;
        let mut cos = vec![0.0; l * d];
        let mut sin = vec![0.0; l * d];
        let mut rot = vec![0.0; d * d];
        for c in 0..d {
            let pair = (c % dh) / 2;
            let freq = ROPE_BASE.powf(-2.0 * pair as f64 / dh as f64);
            for t in 0..l {
                let angle = t as f64 * freq;
                cos[t * d + c] = angle.cos();
                sin[t * d + c] = angle.sin();
            }
            if c % 2 == 0 && c + 1 < d {
                rot[(c + 1) * d + c] = -1.0;
                rot[c * d + c + 1] = 1.0;
            }
        }
        let table = |shape: [usize; 2], v| Tensor::new(shape.to_vec(), v).expect("rotary table shape");
        Self {
            cos: table([l, d], cos),
            sin: table([l, d], sin),
            rot: table([d, d], rot),
        }
    }
}

const ROPE_BASE: f64 = 10_000.0;

/// Init std of token embeddings.
pub const EMBED_STD: f64 = 0.02;

/// Causal pre-LN transformer with rotary positions and an untied LM head.
#[derive(Clone, Debug)]
pub struct Thinker {
    pub config: ThinkerConfig,
    tok_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    lm_head: Linear,
}

impl Thinker {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ThinkerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let emb = Init::Gaussian { std: EMBED_STD };
        let tok_emb = store.register("thinker.tok_emb", &[config.vocab, d], emb, false, rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("thinker.block{l}");
            let proj = [
                Linear::new(store, &format!("{p}.wq"), d, d, true, rng)?,
                Linear::new(store, &format!("{p}.wk"), d, d, true, rng)?,
                Linear::new(store, &format!("{p}.wv"), d, d, true, rng)?,
                Linear::new(store, &format!("{p}.wo"), d, d, true, rng)?,
            ];
            let lora = if config.lora_rank > 0 {
                Projection::ALL
                    .iter()
                    .map(|&t| LoraAdapter::new(store, &p, t, d, d, config.lora_rank, config.lora_alpha, rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d, rng)?,
                proj,
                lora,
                ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d, rng)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, rng)?,
            });
        }
        Ok(Self {
            ln_f: LayerNorm::new(store, "thinker.ln_f", d, rng)?,
            lm_head: Linear::new(store, "thinker.lm_head", d, config.vocab, false, rng)?,
            config,
            tok_emb,
            blocks,
        })
    }

    /// Token embeddings `[L x d]` (positions are added in the forward pass).
    pub fn embed(&self, g: &Graph, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        g.gather_rows(g.param(self.tok_emb), tokens)
    }

    /// Run the transformer over embeddings. `key_mask[j] == false` hides
    /// position `j` from every query.
    pub fn forward_embeddings(&self, g: &Graph, emb: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let l = g.rows(emb);
        if l > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: l,
                max: self.config.max_seq_len,
            });
        }
        let rope = Rotary::new(l, self.config.d, self.config.heads);
        let (cos, sin, rot) = (g.constant(rope.cos)?, g.constant(rope.sin)?, g.constant(rope.rot)?);
        let rotate = |x: Var| -> Result<Var> { g.add(g.mul(x, cos)?, g.mul(g.matmul(x, rot)?, sin)?) };
        let mut x = emb;
        let mask = match key_mask {
            Some(m) if m.iter().all(|&k| k) => AttnMask::Causal,
            Some(m) => AttnMask::CausalKeys(m.to_vec()),
            None => AttnMask::Causal,
        };
        for block in &self.blocks {
            let xn = block.ln_attn.forward(g, x)?;
            let q = rotate(block.project(g, Projection::Q, xn)?)?;
            let k = rotate(block.project(g, Projection::K, xn)?)?;
            let v = block.project(g, Projection::V, xn)?;
            let att = g.attention(q, k, v, self.config.heads, &mask)?;
            let o = block.project(g, Projection::O, att)?;
            x = g.add(x, o)?;
            let ff = block.ffn.forward(g, block.ln_ff.forward(g, x)?)?;
            x = g.add(x, ff)?;
        }
        self.ln_f.forward(g, x)
    }

    /// `H = Thinker(tokens)`.
    pub fn forward(&self, g: &Graph, seq: &TokenSequence) -> Result<HiddenStates> {
        let emb = self.embed(g, &seq.tokens)?;
        let h = self.forward_embeddings(g, emb, None)?;
        Ok(HiddenStates {
            h,
            roles: seq.roles.clone(),
        })
    }

    pub fn logits(&self, g: &Graph, hidden: Var) -> Result<Var> {
        self.lm_head.forward(g, hidden)
    }

    pub fn lora_adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks.iter().flat_map(|b| b.lora.iter())
    }

    pub fn lora_param_ids(&self) -> Vec<ParamId> {
        self.lora_adapters().flat_map(|a| [a.a, a.b]).collect()
    }

    pub fn lm_head_weight(&self) -> ParamId {
        self.lm_head.weight
    }

    /// Every non-adapter parameter.
    pub fn base_param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let lora = self.lora_param_ids();
        store
            .iter()
            .filter(|(id, p)| p.name.starts_with("thinker.") && !lora.contains(id))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Functional form of [`Thinker::forward`].
pub fn thinker_forward(g: &Graph, thinker: &Thinker, seq: &TokenSequence) -> Result<HiddenStates> {
    thinker.forward(g, seq)
}
