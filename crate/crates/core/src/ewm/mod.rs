//! Cross-modal temporal imagination.
//!
//! Backbone hidden states of each modality are squeezed into a small working
//! width, split into an observed past and a detached future, and a set of
//! learned future queries is rolled forward `S` steps over a context made of
//! the modality's own past and the other modality's past. The imagined tokens
//! are trained to match the pooled future.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CrossAttnBlock, Graph, Init, Linear, ParamId, ParamStore, Var, COSINE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Video, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Video => Modality::Audio,
            Modality::Audio => Modality::Video,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

/// Which parts of the observed past the rollout may look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImaginationMode {
    Cross,
    SelfOnly,
    CrossOnly,
}

/// How imagined steps feed back into the rollout context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutContext {
    /// `[C1; Y1; ...; Ys]`
    Accumulate,
    /// `[C1; Ys]`
    LatestOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwmConfig {
    pub working_dim: usize,
    pub rollout_steps: usize,
    pub future_queries: usize,
    pub keep_min: f64,
    pub keep_max: f64,
    pub modality_dropout: f64,
    pub imagination_weight: f64,
    /// Belief tokens in the single-modality regime; twice as many with both.
    pub base_beliefs: usize,
    pub heads: usize,
    pub imagination_layers: usize,
    pub mode: ImaginationMode,
    pub rollout_context: RolloutContext,
}

impl Default for EwmConfig {
    fn default() -> Self {
        Self {
            working_dim: 16,
            rollout_steps: 3,
            future_queries: 4,
            keep_min: 0.7,
            keep_max: 1.0,
            modality_dropout: 0.15,
            imagination_weight: 1.0,
            base_beliefs: 4,
            heads: 4,
            imagination_layers: 2,
            mode: ImaginationMode::Cross,
            rollout_context: RolloutContext::Accumulate,
        }
    }
}

impl EwmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("ewm: {m}")));
        if !(0.0 < self.keep_min && self.keep_min <= self.keep_max && self.keep_max <= 1.0) {
            return bad(format!("keep range [{}, {}) must satisfy 0 < min <= max <= 1", self.keep_min, self.keep_max));
        }
        if self.rollout_steps == 0 {
            return bad("rollout_steps must be at least 1".into());
        }
        if self.future_queries == 0 || self.base_beliefs == 0 || self.imagination_layers == 0 {
            return bad("future_queries, base_beliefs and imagination_layers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return bad("modality_dropout must lie in [0, 1]".into());
        }
        if self.imagination_weight < 0.0 || !self.imagination_weight.is_finite() {
            return bad("imagination_weight must be finite and non-negative".into());
        }
        if self.heads == 0 || self.working_dim % self.heads != 0 {
            return bad(format!("working_dim {} not divisible by {} heads", self.working_dim, self.heads));
        }
        Ok(())
    }
}

/// Per-modality rollout parameters (never shared between modalities).
#[derive(Clone, Debug)]
pub struct ImaginationBranch {
    pub queries: ParamId,
    pub step_emb: ParamId,
    pub block: CrossAttnBlock,
    pub out: Linear,
}

/// All imagination parameters: down-projections, the shared tag pair and the
/// two rollout branches.
#[derive(Clone, Debug)]
pub struct EwmParams {
    pub config: EwmConfig,
    pub down: [Linear; 2],
    pub tag_self: ParamId,
    pub tag_cross: ParamId,
    pub branches: [ImaginationBranch; 2],
}

impl EwmParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EwmConfig, d: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dw = config.working_dim;
        let emb = Init::Gaussian { std: 0.02 };
        let down = [
            Linear::new(store, "ewm.down.video", d, dw, false, rng)?,
            Linear::new(store, "ewm.down.audio", d, dw, false, rng)?,
        ];
        let tag_self = store.register("ewm.tag_self", &[dw], emb, false, rng)?;
        let tag_cross = store.register("ewm.tag_cross", &[dw], emb, false, rng)?;
        let mut branch = |m: Modality, store: &mut ParamStore| -> Result<ImaginationBranch> {
            let p = format!("ewm.{}", m.name());
            Ok(ImaginationBranch {
                queries: store.register(&format!("{p}.queries"), &[config.future_queries, dw], emb, false, rng)?,
                step_emb: store.register(&format!("{p}.step_emb"), &[config.rollout_steps, dw], emb, false, rng)?,
                block: CrossAttnBlock::new(store, &format!("{p}.attn"), dw, config.imagination_layers, config.heads, rng)?,
                out: Linear::new(store, &format!("{p}.out"), dw, dw, false, rng)?,
            })
        };
        let branches = [branch(Modality::Video, store)?, branch(Modality::Audio, store)?];
        Ok(Self {
            config,
            down,
            tag_self,
            tag_cross,
            branches,
        })
    }

    pub fn branch(&self, m: Modality) -> &ImaginationBranch {
        &self.branches[m.index()]
    }
}

/// One modality's working-width tokens.
#[derive(Clone, Copy, Debug)]
pub struct ModalityStream {
    pub modality: Modality,
    pub z: Var,
    pub present: bool,
}

/// `Z_m = H_m W_m` with a per-modality projection.
pub fn bottleneck_project(g: &Graph, params: &EwmParams, h: Var, modality: Modality) -> Result<Var> {
    params.down[modality.index()].forward(g, h)
}

/// Training draws uniformly from `[keep_min, keep_max)`; inference keeps everything.
pub fn sample_keep_ratio<R: Rng + ?Sized>(config: &EwmConfig, rng: &mut R, phase: Phase) -> f64 {
    match phase {
        Phase::Infer => 1.0,
        Phase::Train if config.keep_min >= config.keep_max => config.keep_min,
        Phase::Train => rng.gen_range(config.keep_min..config.keep_max),
    }
}

/// With probability `p` drop one of the two present modalities (chosen
/// uniformly). A lone modality is never dropped.
pub fn apply_modality_dropout<R: Rng + ?Sized>(streams: &mut [ModalityStream], p: f64, rng: &mut R, phase: Phase) {
    let mut flags: Vec<bool> = streams.iter().map(|s| s.present).collect();
    drop_modality(&mut flags, p, rng, phase);
    for (s, f) in streams.iter_mut().zip(flags) {
        s.present = f;
    }
}

/// [`apply_modality_dropout`] on bare presence flags.
pub fn drop_modality<R: Rng + ?Sized>(present: &mut [bool], p: f64, rng: &mut R, phase: Phase) {
    if phase == Phase::Infer || p <= 0.0 {
        return;
    }
    let live: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    if live.len() < 2 {
        return;
    }
    if rng.gen::<f64>() < p {
        present[live[rng.gen_range(0..live.len())]] = false;
    }
}

/// Past/future split of one stream.
#[derive(Clone, Copy, Debug)]
pub struct SplitResult {
    pub past: Var,
    /// Detached future rows; `None` at inference.
    pub fut: Option<Var>,
    /// Last observed row, `[1 x d_w]`.
    pub boundary: Var,
    pub past_len: usize,
}

/// Number of past rows for a stream of length `len`.
pub fn past_length(len: usize, keep: f64, phase: Phase) -> Result<usize> {
    match phase {
        Phase::Infer => Ok(len),
        Phase::Train if len < 2 => Err(Error::DegenerateLength(len)),
        Phase::Train => Ok(((keep * len as f64).floor() as usize).clamp(1, len - 1)),
    }
}

pub fn temporal_split(g: &Graph, stream: &ModalityStream, keep: f64, phase: Phase) -> Result<SplitResult> {
    if !stream.present {
        return Err(Error::Contract(format!("{} stream is absent", stream.modality.name())));
    }
    let len = g.rows(stream.z);
    let t_p = past_length(len, keep, phase)?;
    let past = g.slice_rows(stream.z, 0, t_p)?;
    let fut = if t_p < len {
        let f = g.slice_rows(stream.z, t_p, len)?;
        Some(g.detach(f))
    } else {
        None
    };
    Ok(SplitResult {
        past,
        fut,
        boundary: g.slice_rows(stream.z, t_p - 1, t_p)?,
        past_len: t_p,
    })
}

/// Initial rollout context for `target`: its own past tagged `self`, then the
/// other modality's past tagged `cross`. Missing parts are skipped; when the
/// mode leaves nothing, the own past is used.
pub fn build_rollout_context(
    g: &Graph,
    params: &EwmParams,
    target: Modality,
    splits: &[Option<SplitResult>; 2],
    mode: ImaginationMode,
) -> Result<Var> {
    let own = splits[target.index()]
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("rollout target {} is absent", target.name())))?;
    let own_rows = g.add_row(own.past, g.param(params.tag_self))?;
    let other_rows = match &splits[target.other().index()] {
        Some(s) => Some(g.add_row(s.past, g.param(params.tag_cross))?),
        None => None,
    };
    match (mode, other_rows) {
        (ImaginationMode::Cross, Some(o)) => g.concat_rows(&[own_rows, o]),
        (ImaginationMode::CrossOnly, Some(o)) => Ok(o),
        _ => Ok(own_rows),
    }
}

/// Imagined tokens of one branch, one `[N_s x d_w]` block per step.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub modality: Modality,
    pub steps: Vec<Var>,
    /// Final-layer attention node of each step (diagnostics).
    pub attention: Vec<Var>,
    /// Context rows seen by each step.
    pub context_len: Vec<usize>,
}

pub fn imagine_rollout(
    g: &Graph,
    params: &EwmParams,
    modality: Modality,
    context: Var,
) -> Result<Rollout> {
    let cfg = &params.config;
    if cfg.rollout_steps == 0 {
        return Err(Error::Config("rollout_steps must be at least 1".into()));
    }
    let branch = params.branch(modality);
    let queries = g.param(branch.queries);
    let step_emb = g.param(branch.step_emb);
    let mut memory = vec![context];
    let mut out = Rollout {
        modality,
        steps: Vec::with_capacity(cfg.rollout_steps),
        attention: Vec::new(),
        context_len: Vec::new(),
    };
    for s in 0..cfg.rollout_steps {
        let q = g.add_row(queries, g.slice_rows(step_emb, s, s + 1)?)?;
        out.context_len.push(memory.iter().map(|m| g.rows(*m)).sum());
        let f = branch.block.forward(g, q, &memory)?;
        let y = branch.out.forward(g, f.out)?;
        out.attention.push(*f.attention.last().expect("at least one layer"));
        out.steps.push(y);
        match cfg.rollout_context {
            RolloutContext::Accumulate => memory.push(y),
            RolloutContext::LatestOnly => memory = vec![context, y],
        }
    }
    Ok(out)
}

/// Per-step fidelity against the pooled future, averaged over modalities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFidelity {
    pub cosine: Vec<f64>,
    pub mse: Vec<f64>,
}

pub struct ImaginationLoss {
    pub loss: Var,
    pub fidelity: StepFidelity,
}

/// Mean over supervised modalities of the mean over steps of
/// `MSE + 0.5 * (1 - cos)` against the pooled, detached future.
pub fn imagination_loss(g: &Graph, pairs: &[(&Rollout, Var)], future_queries: usize) -> Result<ImaginationLoss> {
    if pairs.is_empty() {
        return Err(Error::Contract("imagination loss needs at least one supervised modality".into()));
    }
    let n_steps = pairs[0].0.steps.len();
    let mut fidelity = StepFidelity {
        cosine: vec![0.0; n_steps],
        mse: vec![0.0; n_steps],
    };
    let mut per_modality = Vec::with_capacity(pairs.len());
    for (rollout, fut) in pairs {
        let pooled = g.adaptive_avg_pool(*fut, future_queries)?;
        let target = g.detach(pooled);
        let mut terms = Vec::with_capacity(n_steps);
        for (s, &pred) in rollout.steps.iter().enumerate() {
            let mse = g.mse(pred, target)?;
            let cos = g.cosine_alignment(pred, target, COSINE_EPS)?;
            fidelity.mse[s] += g.item(mse) / pairs.len() as f64;
            fidelity.cosine[s] += (1.0 - 2.0 * g.item(cos)) / pairs.len() as f64;
            terms.push(g.add(mse, cos)?);
        }
        per_modality.push(g.scale(g.add_n(&terms)?, 1.0 / n_steps as f64)?);
    }
    let loss = g.scale(g.add_n(&per_modality)?, 1.0 / pairs.len() as f64)?;
    Ok(ImaginationLoss { loss, fidelity })
}
