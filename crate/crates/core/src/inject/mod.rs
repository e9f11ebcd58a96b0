//! Belief injection into the backbone sequence.
//!
//! Belief tokens are lifted to the backbone width and spliced into the
//! (optionally truncated) sequence: the first half right after the last
//! audiovisual token, the rest right before the answer. Inserted positions are
//! attended to but never supervised.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Role, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Graph, LayerNorm, Linear, ParamStore, Tensor, Var, IGNORE_INDEX};

/// Where belief tokens enter the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectLayer {
    /// Spliced into the input embeddings; the whole backbone sees them.
    Embedding,
    /// Spliced into the final hidden states right before the LM head.
    FinalHidden,
}

/// Interleaved halves, or everything after the audiovisual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectPositions {
    Interleaved,
    Single,
}

#[derive(Clone, Debug)]
pub struct InjectParams {
    pub up: Linear,
    pub norm: LayerNorm,
}

impl InjectParams {
    /// `gain` initializes the output scale so belief rows start at the
    /// magnitude of the rows they are spliced between.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        working_dim: usize,
        d: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let norm = LayerNorm::new(store, "inject.norm", d, rng)?;
        *store.value_mut(norm.gamma) = Tensor::full(&[d], gain);
        Ok(Self {
            up: Linear::new(store, "inject.up", working_dim, d, true, rng)?,
            norm,
        })
    }
}

/// `LayerNorm(b W + c)`, `[N_q x d_w] -> [N_q x d]`.
pub fn up_project_beliefs(g: &Graph, params: &InjectParams, beliefs: Var) -> Result<Var> {
    let lifted = params.up.forward(g, beliefs)?;
    params.norm.forward(g, lifted)
}

/// `(p_av, p_ans)`: the index right after the last audiovisual token (end of
/// the system prompt when there is none) and the first answer index.
pub fn locate_boundaries(roles: &[Role]) -> Result<(usize, usize)> {
    let p_ans = roles
        .iter()
        .position(|r| *r == Role::Answer)
        .ok_or_else(|| Error::Contract("sequence has no answer region".into()))?;
    let p_av = match roles.iter().rposition(|r| r.is_audiovisual()) {
        Some(i) => i + 1,
        None => roles.iter().rposition(|r| *r == Role::System).map_or(0, |i| i + 1),
    };
    Ok((p_av, p_ans))
}

/// Positions kept by the token-level keep mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepPlan {
    pub kept: Vec<usize>,
    /// Original position to its index after truncation.
    pub map: Vec<Option<usize>>,
}

impl KeepPlan {
    pub fn is_identity(&self) -> bool {
        self.kept.len() == self.map.len()
    }

    /// Closest kept position at or before `pos` (after relocation).
    pub fn relocate(&self, pos: usize) -> Option<usize> {
        self.map[..=pos.min(self.map.len() - 1)].iter().rev().find_map(|m| *m)
    }
}

/// Keep the first `clamp(floor(keep * len), 1, len)` tokens of every
/// contiguous audiovisual region; everything else is untouched.
pub fn keep_plan(roles: &[Role], keep: f64) -> KeepPlan {
    let mut kept = Vec::with_capacity(roles.len());
    let mut map = vec![None; roles.len()];
    let mut i = 0;
    while i < roles.len() {
        let role = roles[i];
        let mut end = i;
        while end < roles.len() && roles[end] == role {
            end += 1;
        }
        let len = end - i;
        let take = if role.is_audiovisual() {
            ((keep * len as f64).floor() as usize).clamp(1, len)
        } else {
            len
        };
        for (p, slot) in map.iter_mut().enumerate().take(i + take).skip(i) {
            *slot = Some(kept.len());
            kept.push(p);
        }
        i = end;
    }
    KeepPlan { kept, map }
}

/// Apply [`keep_plan`] to an embedded sequence.
pub fn apply_keep_mask(g: &Graph, emb: Var, roles: &[Role], keep: f64) -> Result<(Var, KeepPlan)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Contract(format!("keep ratio {keep} outside (0, 1]")));
    }
    let plan = keep_plan(roles, keep);
    if plan.is_identity() {
        return Ok((emb, plan));
    }
    Ok((g.gather_rows(emb, &plan.kept)?, plan))
}

/// Per-position labels: answer tokens supervised, everything else ignored.
/// Unshifted; see [`crate::backbone::shift_labels`].
pub fn answer_labels(seq: &TokenSequence) -> Vec<i64> {
    seq.tokens
        .iter()
        .zip(&seq.roles)
        .map(|(&t, r)| if *r == Role::Answer { t as i64 } else { IGNORE_INDEX })
        .collect()
}

/// One sequence after truncation and belief injection.
#[derive(Clone, Debug)]
pub struct AugmentedSequence {
    pub rows: Var,
    pub roles: Vec<Role>,
    pub labels: Vec<i64>,
    pub mask: Vec<bool>,
    /// Boundaries in the truncated, pre-injection sequence.
    pub p_av: usize,
    pub p_ans: usize,
    /// Truncated position to its index after injection.
    pub index_map: Vec<usize>,
}

impl AugmentedSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn belief_positions(&self) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == Role::Belief).collect()
    }

    /// Aligned role / label / mask columns for eyeballing.
    pub fn layout_dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>4} {:>4} {:>6} {:>4}", "pos", "role", "label", "mask");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{:>4} {:>4} {:>6} {:>4}",
                i,
                self.roles[i].short(),
                self.labels[i],
                u8::from(self.mask[i])
            );
        }
        out
    }
}

/// Splice `beliefs` into `rows` at `(p_av, p_ans)`. The first `ceil(N_q / 2)`
/// rows go to `p_av` and the rest to `p_ans` when interleaved; all of them go
/// to `p_av` otherwise. Works on embeddings or on hidden states alike.
pub fn interleave_inject(
    g: &Graph,
    rows: Var,
    roles: &[Role],
    labels: &[i64],
    beliefs: Option<Var>,
    positions: InjectPositions,
) -> Result<AugmentedSequence> {
    if g.rows(rows) != roles.len() || labels.len() != roles.len() {
        return Err(Error::Contract(format!(
            "injection input has {} rows, {} roles and {} labels",
            g.rows(rows),
            roles.len(),
            labels.len()
        )));
    }
    let (p_av, p_ans) = locate_boundaries(roles)?;
    let Some(beliefs) = beliefs else {
        return Ok(AugmentedSequence {
            rows,
            roles: roles.to_vec(),
            labels: labels.to_vec(),
            mask: vec![true; roles.len()],
            p_av,
            p_ans,
            index_map: (0..roles.len()).collect(),
        });
    };
    let n_q = g.rows(beliefs);
    let first = match positions {
        InjectPositions::Interleaved => n_q.div_ceil(2),
        InjectPositions::Single => n_q,
    };
    let mut parts = Vec::with_capacity(5);
    let mut out_roles = Vec::with_capacity(roles.len() + n_q);
    let mut out_labels = Vec::with_capacity(roles.len() + n_q);
    let mut index_map = Vec::with_capacity(roles.len());
    let mut push_orig = |parts: &mut Vec<Var>, start: usize, end: usize, out_roles: &mut Vec<Role>, out_labels: &mut Vec<i64>| -> Result<()> {
        if start < end {
            parts.push(g.slice_rows(rows, start, end)?);
            for i in start..end {
                index_map.push(out_roles.len());
                out_roles.push(roles[i]);
                out_labels.push(labels[i]);
            }
        }
        Ok(())
    };
    let push_beliefs = |parts: &mut Vec<Var>, start: usize, end: usize, out_roles: &mut Vec<Role>, out_labels: &mut Vec<i64>| -> Result<()> {
        if start < end {
            parts.push(g.slice_rows(beliefs, start, end)?);
            out_roles.extend(std::iter::repeat(Role::Belief).take(end - start));
            out_labels.extend(std::iter::repeat(IGNORE_INDEX).take(end - start));
        }
        Ok(())
    };
    push_orig(&mut parts, 0, p_av, &mut out_roles, &mut out_labels)?;
    push_beliefs(&mut parts, 0, first, &mut out_roles, &mut out_labels)?;
    push_orig(&mut parts, p_av, p_ans, &mut out_roles, &mut out_labels)?;
    push_beliefs(&mut parts, first, n_q, &mut out_roles, &mut out_labels)?;
    push_orig(&mut parts, p_ans, roles.len(), &mut out_roles, &mut out_labels)?;
    let len = out_roles.len();
    Ok(AugmentedSequence {
        rows: g.concat_rows(&parts)?,
        roles: out_roles,
        labels: out_labels,
        mask: vec![true; len],
        p_av,
        p_ans,
        index_map,
    })
}

/// Right-pad every sequence to the longest one with zero rows, mask 0 and
/// ignored labels.
pub fn pad_batch(g: &Graph, items: Vec<AugmentedSequence>) -> Result<Vec<AugmentedSequence>> {
    let longest = items.iter().map(|s| s.len()).max().unwrap_or(0);
    items
        .into_iter()
        .map(|mut s| {
            let extra = longest - s.len();
            if extra > 0 {
                let d = g.cols(s.rows);
                let pad = g.constant(Tensor::zeros(&[extra, d]))?;
                s.rows = g.concat_rows(&[s.rows, pad])?;
                s.roles.extend(std::iter::repeat(Role::Pad).take(extra));
                s.labels.extend(std::iter::repeat(IGNORE_INDEX).take(extra));
                s.mask.extend(std::iter::repeat(false).take(extra));
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use Role::*;

    fn roles(spec: &[(Role, usize)]) -> Vec<Role> {
        spec.iter().flat_map(|&(r, n)| std::iter::repeat(r).take(n)).collect()
    }

    #[test]
    fn boundaries_by_index_arithmetic() {
        let r = roles(&[(System, 2), (Video, 3), (Audio, 2), (Subtitle, 4), (Answer, 2)]);
        assert_eq!(locate_boundaries(&r).unwrap(), (7, 11));
        let r = roles(&[(System, 2), (Video, 3), (Subtitle, 4), (Answer, 2)]);
        assert_eq!(locate_boundaries(&r).unwrap(), (5, 9));
        let r = roles(&[(System, 2), (Subtitle, 4), (Answer, 2)]);
        assert_eq!(locate_boundaries(&r).unwrap(), (2, 6));
        assert!(locate_boundaries(&roles(&[(System, 2), (Subtitle, 1)])).is_err());
    }

    #[test]
    fn keep_plan_truncates_each_region() {
        let r = roles(&[(System, 2), (Video, 10), (Audio, 10), (Subtitle, 4), (Answer, 2)]);
        let plan = keep_plan(&r, 0.73);
        assert_eq!(plan.kept.len(), 2 + 7 + 7 + 4 + 2);
        assert!(keep_plan(&r, 1.0).is_identity());
        assert_eq!(plan.relocate(11), Some(8));
        assert_eq!(plan.map[12], Some(9));
    }
}
