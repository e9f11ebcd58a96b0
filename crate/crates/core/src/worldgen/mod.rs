//! Synthetic lead-lag affect world.
//!
//! A latent affect state follows a Markov chain. Video and audio emit one
//! token per step by quantizing a noisy state prototype against a shared
//! codebook; audio reflects the state `lead_lag` steps ahead of video, so the
//! audio past predicts the video future. The transcript only covers the first
//! third of the trajectory and the label is the final state.

mod dataset;

use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_split, make_dataset, write_split, Dataset, Manifest, SplitInfo};

/// Generation settings for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub states: usize,
    /// Probability of staying in the current state; the rest is spread evenly.
    pub stay_prob: f64,
    /// Steps per episode (video and audio length).
    pub seq_len: usize,
    pub lead_lag: usize,
    pub noise: f64,
    pub codebook: usize,
    pub emission_dim: usize,
    pub words_per_state: usize,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            states: 4,
            stay_prob: 0.99,
            seq_len: 12,
            lead_lag: 2,
            noise: 2.0,
            codebook: 32,
            emission_dim: 8,
            words_per_state: 4,
            seed: 0,
            train: 1000,
            val: 200,
            test: 400,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gen: {m}")));
        if self.states == 0 {
            return bad("states must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return bad("stay_prob must lie in [0, 1]");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return bad("noise must be finite and non-negative");
        }
        if self.codebook < self.states {
            return bad("codebook must have at least one entry per state");
        }
        if self.emission_dim == 0 || self.words_per_state == 0 {
            return bad("emission_dim and words_per_state must be positive");
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("split sizes must be at least 1");
        }
        Ok(())
    }

    /// Sticky transition matrix built from `stay_prob`.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.states;
        if k == 1 {
            return vec![vec![1.0]];
        }
        let off = (1.0 - self.stay_prob) / (k - 1) as f64;
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { self.stay_prob } else { off }).collect())
            .collect()
    }

    pub fn text_words(&self) -> usize {
        self.states * self.words_per_state
    }

    /// Transcript length: one word per step of the first third.
    pub fn text_len(&self) -> usize {
        self.seq_len.div_ceil(3)
    }
}

/// The latent process plus its emission model.
#[derive(Clone, Debug)]
pub struct AffectProcess {
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
    codebook: Vec<Vec<f64>>,
    video_proto: Vec<usize>,
    audio_proto: Vec<usize>,
    pub lead_lag: usize,
    pub noise: f64,
    pub seq_len: usize,
    pub words_per_state: usize,
}

impl AffectProcess {
    /// Build from an explicit transition matrix; the chain starts from its
    /// stationary distribution. Codebook and prototypes are drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(
        transition: Vec<Vec<f64>>,
        config: &GenConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let k = transition.len();
        if k == 0 || k > config.codebook {
            return Err(Error::Config(format!("{k} states for a codebook of {}", config.codebook)));
        }
        for (i, row) in transition.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != k || row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("transition row {i} is not a distribution")));
            }
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let codebook: Vec<Vec<f64>> = (0..config.codebook)
            .map(|_| (0..config.emission_dim).map(|_| normal.sample(rng)).collect())
            .collect();
        let order = rand::seq::index::sample(rng, config.codebook, config.codebook.min(2 * k).max(k));
        let order: Vec<usize> = order.into_iter().collect();
        let video_proto = order[..k].to_vec();
        // Audio reuses codes when the codebook is too small for disjoint sets.
        let audio_proto = if order.len() >= 2 * k { order[k..2 * k].to_vec() } else { video_proto.clone() };
        let initial = stationary_distribution(&transition);
        Ok(Self {
            transition,
            initial,
            codebook,
            video_proto,
            audio_proto,
            lead_lag: config.lead_lag,
            noise: config.noise,
            seq_len: config.seq_len,
            words_per_state: config.words_per_state,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Self::new(config.transition_matrix(), config, rng)
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Codebook index of the prototype for `state` in each modality.
    pub fn prototype_codes(&self, state: usize) -> (u32, u32) {
        (self.video_proto[state] as u32, self.audio_proto[state] as u32)
    }

    fn emit<R: Rng + ?Sized>(&self, code: usize, rng: &mut R) -> u32 {
        let proto = &self.codebook[code];
        if self.noise == 0.0 {
            return code as u32;
        }
        let normal = Normal::new(0.0, self.noise).expect("noise is validated");
        let point: Vec<f64> = proto.iter().map(|p| p + normal.sample(rng)).collect();
        nearest(&self.codebook, &point) as u32
    }
}

fn nearest(codebook: &[Vec<f64>], point: &[f64]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in codebook.iter().enumerate() {
        let d = dist(c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Stationary distribution by power iteration on the lazy chain `(I + T) / 2`,
/// which has the same fixed point and always converges.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let k = transition.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..100_000 {
        let mut next = vec![0.0; k];
        for (i, row) in transition.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += 0.5 * pi[i] * p;
            }
            next[i] += 0.5 * pi[i];
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub video: Vec<u32>,
    pub audio: Vec<u32>,
    pub text: Vec<u32>,
    pub label: usize,
    pub seed: u64,
    /// Hidden state per step; diagnostics only, never serialized.
    pub latent: Vec<usize>,
}

pub fn sample_episode<R: Rng + ?Sized>(process: &AffectProcess, seed: u64, rng: &mut R) -> Episode {
    let steps = process.seq_len;
    let mut latent = Vec::with_capacity(steps);
    let init = WeightedIndex::new(&process.initial).expect("stationary distribution");
    latent.push(init.sample(rng));
    for t in 1..steps {
        let row = WeightedIndex::new(&process.transition[latent[t - 1]]).expect("valid row");
        latent.push(row.sample(rng));
    }
    let video = latent.iter().map(|&s| process.emit(process.video_proto[s], rng)).collect();
    let audio = (0..steps)
        .map(|t| {
            let s = latent[(t + process.lead_lag).min(steps - 1)];
            process.emit(process.audio_proto[s], rng)
        })
        .collect();
    let text = latent[..steps.div_ceil(3)]
        .iter()
        .map(|&s| (s * process.words_per_state + rng.gen_range(0..process.words_per_state)) as u32)
        .collect();
    Episode {
        video,
        audio,
        text,
        label: latent[steps - 1],
        seed,
        latent,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    DropVideo,
    DropAudio,
}

/// Remove one modality's tokens for missing-modality evaluation.
pub fn corrupt_modality(episode: &Episode, mode: Corruption) -> Result<Episode> {
    let mut out = episode.clone();
    match mode {
        Corruption::None => {}
        Corruption::DropVideo => out.video.clear(),
        Corruption::DropAudio => out.audio.clear(),
    }
    if out.video.is_empty() && out.audio.is_empty() {
        return Err(Error::Contract("cannot drop the only remaining modality".into()));
    }
    Ok(out)
}
