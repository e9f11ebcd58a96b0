use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_episode, AffectProcess, Episode, GenConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "ewm-lab-episodes v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    video: Vec<u32>,
    audio: Vec<u32>,
    text: Vec<u32>,
    label: usize,
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: GenConfig,
    pub train: SplitInfo,
    pub val: SplitInfo,
    pub test: SplitInfo,
}

/// All three splits plus the process that generated them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub process: AffectProcess,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Dataset {
    /// Pure generation; nothing touches the filesystem.
    pub fn generate(config: &GenConfig) -> Result<Self> {
        config.validate()?;
        let mut world_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let process = AffectProcess::from_config(config, &mut world_rng)?;
        let split = |stream: u64, n: usize| {
            let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
            seeds.set_stream(stream);
            (0..n)
                .map(|_| {
                    let seed = seeds.next_u64();
                    sample_episode(&process, seed, &mut ChaCha8Rng::seed_from_u64(seed))
                })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            train: split(1, config.train),
            val: split(2, config.val),
            test: split(3, config.test),
            process,
        })
    }
}

fn encode(episodes: &[Episode]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for ep in episodes {
        let rec = Record {
            video: ep.video.clone(),
            audio: ep.audio.clone(),
            text: ep.text.clone(),
            label: ep.label,
            meta: Meta { seed: ep.seed },
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json("episode record", e))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Write one split as JSON lines and return its manifest entry.
pub fn write_split(episodes: &[Episode], path: &Path) -> Result<SplitInfo> {
    let bytes = encode(episodes)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(SplitInfo {
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        count: episodes.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Episodes read back from a split file carry no latent trajectory.
pub fn load_split(path: &Path) -> Result<Vec<Episode>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(Episode {
            video: rec.video,
            audio: rec.audio,
            text: rec.text,
            label: rec.label,
            seed: rec.meta.seed,
            latent: Vec::new(),
        });
    }
    Ok(out)
}

/// Generate and write `train.jsonl`, `val.jsonl`, `test.jsonl` and
/// `manifest.json` under `dir`.
pub fn make_dataset(config: &GenConfig, dir: &Path) -> Result<(Dataset, Manifest)> {
    let data = Dataset::generate(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: config.clone(),
        train: write_split(&data.train, &dir.join("train.jsonl"))?,
        val: write_split(&data.val, &dir.join("val.jsonl"))?,
        test: write_split(&data.test, &dir.join("test.jsonl"))?,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((data, manifest))
}
