//! Belief aggregation over the imagined memory.
//!
//! Imagined tokens of every available modality are stacked into a memory
//! bank with a modality type embedding. A regime-specific set of belief
//! queries (twice as many when both modalities are present) attends to the
//! bank, and a projected summary of the last observed tokens is added back.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewm::{Modality, Rollout};
use crate::numerics::{CrossAttnBlock, Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};

/// Rows of the type table; only the first two are used.
pub const TYPE_CLASSES: usize = 6;
pub const ALPHA_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Single,
    Dual,
}

impl Regime {
    pub fn for_modalities(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Regime::Single),
            2 => Ok(Regime::Dual),
            _ => Err(Error::Contract(format!("no belief regime for {n} modalities"))),
        }
    }

    pub fn belief_count(self, base: usize) -> usize {
        match self {
            Regime::Single => base,
            Regime::Dual => 2 * base,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub queries: ParamId,
    pub block: CrossAttnBlock,
}

#[derive(Clone, Debug)]
pub struct MamaParams {
    pub type_table: ParamId,
    pub single: Aggregator,
    pub dual: Aggregator,
    pub residual: Linear,
    pub alpha: ParamId,
}

impl MamaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        working_dim: usize,
        base_beliefs: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let emb = Init::Gaussian { std: 0.02 };
        let type_table = store.register("mama.type_table", &[TYPE_CLASSES, working_dim], emb, false, rng)?;
        for v in &mut store.value_mut(type_table).data_mut()[2 * working_dim..] {
            *v = 0.0;
        }
        let mut aggregator = |name: &str, n: usize, store: &mut ParamStore| -> Result<Aggregator> {
            Ok(Aggregator {
                queries: store.register(&format!("mama.{name}.queries"), &[n, working_dim], emb, false, rng)?,
                block: CrossAttnBlock::new(store, &format!("mama.{name}.attn"), working_dim, 1, heads, rng)?,
            })
        };
        let single = aggregator("single", base_beliefs, store)?;
        let dual = aggregator("dual", 2 * base_beliefs, store)?;
        Ok(Self {
            type_table,
            single,
            dual,
            residual: Linear::new(store, "mama.residual", working_dim, working_dim, false, rng)?,
            alpha: store.register("mama.alpha", &[1], Init::Constant(ALPHA_INIT), false, rng)?,
        })
    }

    pub fn aggregator(&self, regime: Regime) -> &Aggregator {
        match regime {
            Regime::Single => &self.single,
            Regime::Dual => &self.dual,
        }
    }
}

/// Source of one memory row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub modality: Modality,
    /// 1-based rollout step.
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub memory: Var,
    pub type_ids: Vec<usize>,
    pub slots: Vec<MemorySlot>,
}

impl MemoryBank {
    pub fn modalities(&self) -> Vec<Modality> {
        let mut out: Vec<Modality> = self.slots.iter().map(|s| s.modality).collect();
        out.dedup();
        out
    }
}

/// Video steps then audio steps, each row shifted by its type embedding.
pub fn assemble_memory(g: &Graph, params: &MamaParams, rollouts: &[&Rollout]) -> Result<MemoryBank> {
    let mut ordered: Vec<&Rollout> = rollouts.to_vec();
    ordered.sort_by_key(|r| r.modality);
    let mut parts = Vec::new();
    let mut type_ids = Vec::new();
    let mut slots = Vec::new();
    for r in ordered {
        for (s, &y) in r.steps.iter().enumerate() {
            let n = g.rows(y);
            parts.push(y);
            type_ids.extend(std::iter::repeat(r.modality.index()).take(n));
            slots.extend(std::iter::repeat(MemorySlot { modality: r.modality, step: s + 1 }).take(n));
        }
    }
    if parts.is_empty() {
        return Err(Error::Contract("memory bank needs at least one rollout".into()));
    }
    let raw = g.concat_rows(&parts)?;
    let types = g.gather_rows(g.param(params.type_table), &type_ids)?;
    Ok(MemoryBank {
        memory: g.add(raw, types)?,
        type_ids,
        slots,
    })
}

#[derive(Clone, Debug)]
pub struct BeliefState {
    pub beliefs: Var,
    pub regime: Regime,
    /// Head-averaged attention `[N_q x N_M]`.
    pub attention: Tensor,
}

pub fn aggregate_beliefs(g: &Graph, params: &MamaParams, bank: &MemoryBank, regime: Regime) -> Result<BeliefState> {
    let expected = Regime::for_modalities(bank.modalities().len())?;
    if expected != regime {
        return Err(Error::Contract(format!(
            "{regime:?} regime requested for a memory of {} modalities",
            bank.modalities().len()
        )));
    }
    let agg = params.aggregator(regime);
    let out = agg.block.forward(g, g.param(agg.queries), &[bank.memory])?;
    let probs = g
        .attention_probs(out.attention[0])
        .expect("cross-attention node carries probabilities");
    Ok(BeliefState {
        beliefs: out.out,
        regime,
        attention: head_average(&probs),
    })
}

/// Mean over the leading head axis of `[heads x q x k]`.
pub fn head_average(probs: &Tensor) -> Tensor {
    let (h, q, k) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut out = vec![0.0; q * k];
    for head in probs.data().chunks(q * k) {
        for (o, p) in out.iter_mut().zip(head) {
            *o += p / h as f64;
        }
    }
    Tensor::new(vec![q, k], out).expect("q x k")
}

/// `b + alpha * W_r * mean(boundaries)`, broadcast over every belief row.
pub fn boundary_residual(g: &Graph, params: &MamaParams, beliefs: Var, boundaries: &[Var]) -> Result<Var> {
    if boundaries.is_empty() {
        return Err(Error::Contract("boundary residual needs at least one boundary token".into()));
    }
    let mean = g.scale(g.add_n(boundaries)?, 1.0 / boundaries.len() as f64)?;
    let projected = params.residual.forward(g, mean)?;
    let scaled = g.scale_by(projected, g.param(params.alpha))?;
    g.add_row(beliefs, scaled)
}

/// One cell of the belief-to-memory attention map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub sample_id: usize,
    pub belief_idx: usize,
    pub memory_idx: usize,
    pub memory_modality: Modality,
    pub step: usize,
    pub weight: f64,
}

pub fn export_attention_mass(sample_id: usize, state: &BeliefState, bank: &MemoryBank) -> Vec<AttentionRow> {
    let att = &state.attention;
    let mut rows = Vec::with_capacity(att.len());
    for b in 0..att.rows() {
        for (m, slot) in bank.slots.iter().enumerate() {
            rows.push(AttentionRow {
                sample_id,
                belief_idx: b,
                memory_idx: m,
                memory_modality: slot.modality,
                step: slot.step,
                weight: att.get2(b, m),
            });
        }
    }
    rows
}

/// Per belief token, total attention on video and on audio memory rows.
pub fn modality_mass(state: &BeliefState, bank: &MemoryBank) -> Vec<[f64; 2]> {
    (0..state.attention.rows())
        .map(|b| {
            let mut mass = [0.0; 2];
            for (m, slot) in bank.slots.iter().enumerate() {
                mass[slot.modality.index()] += state.attention.get2(b, m);
            }
            mass
        })
        .collect()
}

pub fn write_attention_csv(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_sizes() {
        assert_eq!(Regime::for_modalities(2).unwrap().belief_count(4), 8);
        assert_eq!(Regime::for_modalities(1).unwrap().belief_count(4), 4);
        assert!(Regime::for_modalities(0).is_err());
    }

    #[test]
    fn head_average_of_identical_heads_is_identity() {
        let p = Tensor::new(vec![2, 1, 2], vec![0.25, 0.75, 0.25, 0.75]).unwrap();
        assert_eq!(head_average(&p).data(), &[0.25, 0.75]);
    }
}
