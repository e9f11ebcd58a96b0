use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::backbone::{Role, TokenSequence};
use crate::error::{Error, Result};
use crate::ewm::{sample_keep_ratio, Phase, StepFidelity};
use crate::inject::keep_plan;
use crate::mama::{export_attention_mass, AttentionRow};
use crate::numerics::{Graph, Tensor};
use crate::worldgen::{corrupt_modality, Corruption, Episode};

/// Modality condition and keep ratio of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub corruption: Corruption,
    pub keep: f64,
}

impl Scenario {
    pub const FULL: Scenario = Scenario {
        corruption: Corruption::None,
        keep: 1.0,
    };

    pub fn name(&self) -> String {
        let modality = match self.corruption {
            Corruption::None => "full",
            Corruption::DropVideo => "no_video",
            Corruption::DropAudio => "no_audio",
        };
        format!("{modality}@{}", self.keep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub scenario: Scenario,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub count: usize,
}

/// Fraction of matching entries.
pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Support-weighted mean of per-class F1 over the classes present in `truth`.
/// A class never predicted has precision 0.
pub fn weighted_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let total: usize = support.iter().sum();
    if total == 0 {
        return 0.0;
    }
    (0..classes)
        .map(|c| {
            if support[c] == 0 || tp[c] == 0 {
                return 0.0;
            }
            let precision = tp[c] as f64 / predicted[c] as f64;
            let recall = tp[c] as f64 / support[c] as f64;
            support[c] as f64 * 2.0 * precision * recall / (precision + recall)
        })
        .sum::<f64>()
        / total as f64
}

/// Token-level keep mask applied to a sequence (not to embeddings).
fn truncate(seq: &TokenSequence, keep: f64) -> TokenSequence {
    let plan = keep_plan(&seq.roles, keep);
    TokenSequence {
        tokens: plan.kept.iter().map(|&i| seq.tokens[i]).collect(),
        roles: plan.kept.iter().map(|&i| seq.roles[i]).collect(),
    }
}

fn log_softmax_at(logits: &Tensor, row: usize, target: usize) -> f64 {
    let r = logits.row(row);
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    r[target] - lse
}

impl Model {
    /// Log-likelihood of each class's answer tokens for one episode.
    pub fn class_scores(&self, ep: &Episode, scenario: Scenario) -> Result<Vec<f64>> {
        let ep = corrupt_modality(ep, scenario.corruption)?;
        let present = [!ep.video.is_empty(), !ep.audio.is_empty()];
        let prefix = truncate(&self.sequence(&ep, present, None)?, scenario.keep);
        let g = Graph::inference(&self.store);
        let beliefs = if self.config.components.uses_ewm() {
            let hidden = self.thinker.forward(&g, &prefix)?;
            self.beliefs(&g, &hidden, present, 1.0, Phase::Infer)?.injected
        } else {
            None
        };
        let items: Vec<_> = (0..self.layout.classes)
            .map(|k| (prefix.with_answer(&self.layout, k), 1.0, beliefs))
            .collect();
        let outputs = self.lm_logits(&g, &items)?;
        Ok(outputs
            .iter()
            .map(|aug| {
                let logits = g.tensor(aug.rows);
                (0..aug.len())
                    .filter(|&i| aug.roles[i] == Role::Answer)
                    .map(|i| log_softmax_at(&logits, i - 1, aug.labels[i] as usize))
                    .sum()
            })
            .collect())
    }

    pub fn predict(&self, ep: &Episode, scenario: Scenario) -> Result<usize> {
        let scores = self.class_scores(ep, scenario)?;
        let mut best = 0;
        for (k, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

pub fn evaluate(model: &Model, episodes: &[Episode], scenario: Scenario) -> Result<EvalMetrics> {
    if episodes.is_empty() {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    if !(scenario.keep > 0.0 && scenario.keep <= 1.0) {
        return Err(Error::Contract(format!("keep ratio {} outside (0, 1]", scenario.keep)));
    }
    let truth: Vec<usize> = episodes.iter().map(|e| e.label).collect();
    let pred = episodes
        .iter()
        .map(|e| model.predict(e, scenario))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalMetrics {
        scenario,
        accuracy: accuracy(&truth, &pred),
        weighted_f1: weighted_f1(&truth, &pred, model.layout.classes),
        count: episodes.len(),
    })
}

/// Full, no-audio and no-video at each keep ratio.
pub fn scenario_grid(keeps: &[f64]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for corruption in [Corruption::None, Corruption::DropAudio, Corruption::DropVideo] {
        for &keep in keeps {
            out.push(Scenario { corruption, keep });
        }
    }
    out
}

/// Per-step cosine and MSE of imagined tokens against the pooled future on
/// held-out episodes, with training-style splits drawn from a fixed seed.
/// Empty for runs without imagination.
pub fn imagination_fidelity(model: &Model, episodes: &[Episode], seed: u64) -> Result<StepFidelity> {
    let mut out = StepFidelity::default();
    if !model.config.components.imagination {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0.0f64;
    for ep in episodes {
        let keep = sample_keep_ratio(&model.config.ewm, &mut rng, Phase::Train);
        let g = Graph::inference(&model.store);
        let seq = model.sequence(ep, [true, true], Some(ep.label))?;
        let hidden = model.thinker.forward(&g, &seq)?;
        let b = model.beliefs(&g, &hidden, [true, true], keep, Phase::Train)?;
        if let Some(img) = b.imagination {
            if out.cosine.is_empty() {
                out.cosine = vec![0.0; img.fidelity.cosine.len()];
                out.mse = vec![0.0; img.fidelity.mse.len()];
            }
            for (a, b) in out.cosine.iter_mut().zip(&img.fidelity.cosine) {
                *a += b;
            }
            for (a, b) in out.mse.iter_mut().zip(&img.fidelity.mse) {
                *a += b;
            }
            n += 1.0;
        }
    }
    for v in out.cosine.iter_mut().chain(out.mse.iter_mut()) {
        *v /= n.max(1.0);
    }
    Ok(out)
}

/// Belief-to-memory attention for the first `n` episodes at full observation.
pub fn dump_attention(model: &Model, episodes: &[Episode], n: usize) -> Result<Vec<AttentionRow>> {
    let mut rows = Vec::new();
    for (i, ep) in episodes.iter().take(n).enumerate() {
        let g = Graph::inference(&model.store);
        let present = [!ep.video.is_empty(), !ep.audio.is_empty()];
        let seq = model.sequence(ep, present, None)?;
        let hidden = model.thinker.forward(&g, &seq)?;
        let out = model.beliefs(&g, &hidden, present, 1.0, Phase::Infer)?;
        let (state, bank) = out
            .aggregation
            .ok_or_else(|| Error::Config("attention dump needs imagined beliefs".into()))?;
        rows.extend(export_attention_mass(i, &state, &bank));
    }
    Ok(rows)
}
