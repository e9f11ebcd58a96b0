use log::warn;

use crate::error::Result;
use crate::numerics::{Graph, Var, IGNORE_INDEX};

/// Mean token NLL plus a flag raised when nothing was supervised.
pub struct LmLoss {
    pub loss: Var,
    pub all_ignored: bool,
}

/// Turn per-position token labels into next-token targets: row `i` of the
/// logits predicts the token at position `i + 1`, so `targets[i] = labels[i + 1]`
/// and the last row is ignored.
pub fn shift_labels(labels: &[i64]) -> Vec<i64> {
    let mut out: Vec<i64> = labels.iter().skip(1).copied().collect();
    out.push(IGNORE_INDEX);
    out
}

/// Cross-entropy over rows whose (already shifted) target is not `-100`.
/// All-ignored input yields exactly 0 with `all_ignored` set.
pub fn lm_cross_entropy(g: &Graph, logits: Var, targets: &[i64]) -> Result<LmLoss> {
    let (loss, all_ignored) = g.cross_entropy(logits, targets)?;
    if all_ignored {
        warn!("lm_cross_entropy: every label is ignored, loss defined as 0");
    }
    Ok(LmLoss { loss, all_ignored })
}
