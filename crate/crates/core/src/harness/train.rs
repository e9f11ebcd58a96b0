use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::backbone::{lm_cross_entropy, shift_labels};
use crate::error::{Error, Result, StageExt};
use crate::ewm::{drop_modality, sample_keep_ratio, Phase, StepFidelity};
use crate::mama::csv_err;
use crate::numerics::{Graph, Tensor, Var};
use crate::worldgen::Episode;

/// Losses and diagnostics of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_lm: f64,
    /// Absent when nothing is imagined.
    pub loss_imagine: Option<f64>,
    pub loss_total: f64,
    pub fidelity: StepFidelity,
}

/// Deterministic stream for batch order, keep ratios and dropout.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    rng
}

/// Loss terms of one batch, recorded on `g`.
pub struct StepLoss {
    pub total: Var,
    pub lm: Var,
    pub imagination: Option<Var>,
    pub fidelity: StepFidelity,
}

/// Forward half of a training step: sample keep ratios and dropout, build
/// beliefs, inject, and combine the LM and imagination losses. Reads
/// parameters only through `g`.
pub fn step_loss<R: Rng + ?Sized>(model: &Model, g: &Graph, batch: &[&Episode], rng: &mut R) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let comp = &model.config.components;
    let ewm_cfg = &model.config.ewm;
    let mut items = Vec::with_capacity(batch.len());
    let mut img_terms: Vec<Var> = Vec::new();
    let mut fidelity = StepFidelity::default();
    for ep in batch {
        let keep = if comp.uses_ewm() || comp.temporal_split {
            sample_keep_ratio(ewm_cfg, rng, Phase::Train)
        } else {
            1.0
        };
        let mut present = [!ep.video.is_empty(), !ep.audio.is_empty()];
        if comp.uses_ewm() {
            drop_modality(&mut present, ewm_cfg.modality_dropout, rng, Phase::Train);
        }
        let seq = model.sequence(ep, present, Some(ep.label)).stage(1, "template")?;
        let beliefs = if comp.uses_ewm() {
            let hidden = model.thinker.forward(g, &seq).stage(1, "full-observation forward")?;
            model.beliefs(g, &hidden, present, keep, Phase::Train)?
        } else {
            Default::default()
        };
        if let Some(img) = beliefs.imagination {
            accumulate(&mut fidelity, &img.fidelity);
            img_terms.push(img.loss);
        }
        let lm_keep = if comp.temporal_split { keep } else { 1.0 };
        items.push((seq, lm_keep, beliefs.injected));
    }
    let augmented = model.lm_logits(g, &items)?;
    let logits: Vec<Var> = augmented.iter().map(|a| a.rows).collect();
    let targets: Vec<i64> = augmented.iter().flat_map(|a| shift_labels(&a.labels)).collect();
    let all = g.concat_rows(&logits).stage(13, "LM loss")?;
    let lm = lm_cross_entropy(g, all, &targets).stage(13, "LM loss")?.loss;
    let imagination = if img_terms.is_empty() {
        None
    } else {
        let n = img_terms.len() as f64;
        for v in fidelity.cosine.iter_mut().chain(fidelity.mse.iter_mut()) {
            *v /= n;
        }
        Some(g.scale(g.add_n(&img_terms)?, 1.0 / n).stage(8, "imagination loss")?)
    };
    let total = match imagination {
        Some(l) => g.add(lm, g.scale(l, ewm_cfg.imagination_weight)?).stage(14, "total loss")?,
        None => lm,
    };
    Ok(StepLoss {
        total,
        lm,
        imagination,
        fidelity,
    })
}

/// One pass of the training algorithm over a batch, followed by an AdamW
/// update. Errors carry the stage they came from.
pub fn train_step<R: Rng + ?Sized>(model: &mut Model, batch: &[&Episode], rng: &mut R) -> Result<MetricsRecord> {
    let weight = model.config.ewm.imagination_weight;
    let (record, grads) = {
        let g = Graph::with_params(&model.store);
        let loss = step_loss(model, &g, batch, rng)?;
        let loss_lm = g.item(loss.lm);
        let loss_imagine = loss.imagination.map(|v| g.item(v));
        let record = MetricsRecord {
            step: model.optimizer.step + 1,
            lr: model.optimizer.config.lr_at(model.optimizer.step + 1),
            loss_lm,
            loss_imagine,
            loss_total: loss_lm + weight * loss_imagine.unwrap_or(0.0),
            fidelity: loss.fidelity,
        };
        let mut grads = g.backward(loss.total).stage(15, "backward")?.params();
        for &id in model.optimizer.param_ids() {
            grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(model.store.value(id).shape()));
        }
        (record, grads)
    };
    model.optimizer.step(&mut model.store, &grads).stage(16, "optimizer step")?;
    Ok(record)
}

fn accumulate(into: &mut StepFidelity, from: &StepFidelity) {
    if into.cosine.is_empty() {
        into.cosine = vec![0.0; from.cosine.len()];
        into.mse = vec![0.0; from.mse.len()];
    }
    for (a, b) in into.cosine.iter_mut().zip(&from.cosine) {
        *a += b;
    }
    for (a, b) in into.mse.iter_mut().zip(&from.mse) {
        *a += b;
    }
}

/// Run `config.steps` steps with batches drawn uniformly from `train`.
pub fn fit(model: &mut Model, train: &[Episode]) -> Result<Vec<MetricsRecord>> {
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut rng = training_rng(model.config.seed);
    let mut records = Vec::with_capacity(model.config.steps);
    for _ in 0..model.config.steps {
        let batch: Vec<&Episode> = (0..model.config.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let record = train_step(model, &batch, &mut rng)?;
        if record.step % 50 == 0 {
            log::info!(
                "step {} lm {:.4} img {:?} total {:.4}",
                record.step,
                record.loss_lm,
                record.loss_imagine,
                record.loss_total
            );
        }
        records.push(record);
    }
    Ok(records)
}

/// One CSV row per step: losses then per-step fidelity columns.
pub fn write_training_csv(path: &Path, records: &[MetricsRecord], config_hash: &str) -> Result<()> {
    let steps = records.iter().map(|r| r.fidelity.cosine.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = ["config_hash", "step", "lr", "loss_lm", "loss_imagine", "loss_total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=steps).map(|s| format!("cos_step{s}")));
    header.extend((1..=steps).map(|s| format!("mse_step{s}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in records {
        let mut row = vec![
            config_hash.to_string(),
            r.step.to_string(),
            format!("{:e}", r.lr),
            r.loss_lm.to_string(),
            r.loss_imagine.map(|v| v.to_string()).unwrap_or_default(),
            r.loss_total.to_string(),
        ];
        for s in 0..steps {
            row.push(r.fidelity.cosine.get(s).map(|v| v.to_string()).unwrap_or_default());
        }
        for s in 0..steps {
            row.push(r.fidelity.mse.get(s).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
