use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ThinkerConfig, VocabLayout};
use crate::error::{Error, Result};
use crate::ewm::EwmConfig;
use crate::inject::{InjectLayer, InjectPositions};
use crate::numerics::AdamWConfig;
use crate::worldgen::GenConfig;

/// Which backbone weights train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Base weights frozen, LoRA adapters train.
    FrozenLora,
    /// Every backbone weight trains.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub mode: BackboneMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            max_seq_len: 80,
            lora_rank: 4,
            lora_alpha: 8.0,
            mode: BackboneMode::FrozenLora,
        }
    }
}

impl BackboneConfig {
    pub fn thinker(&self, vocab: usize) -> ThinkerConfig {
        ThinkerConfig {
            vocab,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }
}

/// What the belief tokens are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefSource {
    /// No belief tokens.
    None,
    /// Frozen gaussian rows.
    Random,
    /// Adaptive-pooled observed past, no imagination.
    Pooling,
    /// Imagination memory aggregated by belief queries.
    Imagined,
}

/// Pipeline toggles; the presets map onto the component ablation rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// Train on keep-ratio truncated inputs.
    pub temporal_split: bool,
    /// Roll out and supervise imagined futures.
    pub imagination: bool,
    pub beliefs: BeliefSource,
    pub positions: InjectPositions,
    pub boundary_residual: bool,
    pub inject_layer: InjectLayer,
}

impl Default for Components {
    fn default() -> Self {
        Self::full()
    }
}

impl Components {
    pub fn full() -> Self {
        Self {
            temporal_split: true,
            imagination: true,
            beliefs: BeliefSource::Imagined,
            positions: InjectPositions::Interleaved,
            boundary_residual: true,
            inject_layer: InjectLayer::Embedding,
        }
    }

    /// Plain fine-tuned backbone.
    pub fn baseline() -> Self {
        Self {
            temporal_split: false,
            imagination: false,
            beliefs: BeliefSource::None,
            positions: InjectPositions::Interleaved,
            boundary_residual: false,
            inject_layer: InjectLayer::Embedding,
        }
    }

    /// Cumulative component rows `a` through `f`.
    pub fn row(label: char) -> Option<Self> {
        let mut c = Self::baseline();
        let rank = "abcdef".find(label)?;
        if rank >= 1 {
            c.temporal_split = true;
        }
        if rank >= 2 {
            c.imagination = true;
        }
        if rank >= 3 {
            c.beliefs = BeliefSource::Imagined;
            c.positions = InjectPositions::Single;
        }
        if rank >= 4 {
            c.positions = InjectPositions::Interleaved;
        }
        if rank >= 5 {
            c.boundary_residual = true;
        }
        Some(c)
    }

    /// Belief-construction variants on top of the full pipeline.
    pub fn with_beliefs(source: BeliefSource) -> Self {
        match source {
            BeliefSource::None => Self::baseline(),
            BeliefSource::Imagined => Self::full(),
            other => Self {
                imagination: false,
                beliefs: other,
                boundary_residual: false,
                ..Self::full()
            },
        }
    }

    /// Whether the imagination stack (bottleneck, dropout, split) runs at all.
    pub fn uses_ewm(&self) -> bool {
        self.imagination || self.beliefs != BeliefSource::None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_frac: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Initialization and training-order seed; data has its own seed.
    pub seed: u64,
    pub data: GenConfig,
    pub backbone: BackboneConfig,
    pub ewm: EwmConfig,
    pub components: Components,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Keep ratios evaluated by the robustness grid.
    pub eval_keep_ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GenConfig::default(),
            backbone: BackboneConfig::default(),
            ewm: EwmConfig::default(),
            components: Components::default(),
            optim: OptimConfig::default(),
            steps: 400,
            batch_size: 8,
            eval_keep_ratios: vec![1.0, 0.7, 0.5, 0.3, 0.1],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.ewm.validate()?;
        self.thinker().validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.optim.lr <= 0.0 || !self.optim.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.eval_keep_ratios.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return Err(Error::Config("eval keep ratios must lie in (0, 1]".into()));
        }
        if self.backbone.mode == BackboneMode::FrozenLora && self.backbone.lora_rank == 0 {
            return Err(Error::Config("frozen_lora backbone needs lora_rank > 0".into()));
        }
        let longest = 6 + 2 * self.data.seq_len + self.data.text_len() + 2 * self.ewm.base_beliefs;
        if longest > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "sequences reach {longest} tokens but max_seq_len is {}",
                self.backbone.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            av_codebook: self.data.codebook,
            text_words: self.data.text_words(),
            classes: self.data.states,
        }
    }

    pub fn thinker(&self) -> ThinkerConfig {
        self.backbone.thinker(self.layout().size())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
            warmup_frac: self.optim.warmup_frac,
            total_steps: self.steps,
        }
    }

    /// Short sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}
