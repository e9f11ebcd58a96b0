use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use super::eval::{dump_attention, evaluate, scenario_grid};
use super::experiments::{
    ablation_variants, output_root, run_variants, seeded, write_eval_csv, write_outcomes, SweepAxis,
};
use super::model::Model;
use super::train::{fit, write_training_csv};
use crate::backbone::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::mama::write_attention_csv;
use crate::worldgen::{load_split, make_dataset, Dataset, Episode};

#[derive(Parser, Debug)]
#[command(name = "ewm-lab", about = "Desk-scale emotion world module experiments")]
struct Cli {
    /// Worker threads for multi-run commands.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$EWM_LAB_OUT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Directory written by `gen-data`; otherwise episodes are regenerated
    /// from the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the synthetic world and write train/val/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one configuration, save a checkpoint and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Evaluate a checkpoint over the modality and keep-ratio grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint stem written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Component rows plus the random and pooled belief variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// One mechanism axis at a time.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// rollout_steps, base_beliefs, modality_dropout, imagination_weight,
        /// imagination_mode or keep_ratio.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Belief-to-memory attention mass for held-out episodes.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint stem; trains from scratch when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
}

/// Parse `args` (program name first) and run. Returns the process exit code:
/// 0 on success, 1 for bad flags or configuration, 2 for runtime failures.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn out_dir(common: &Common, name: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| output_root().join(name));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

struct Splits {
    train: Vec<Episode>,
    test: Vec<Episode>,
}

fn splits(cfg: &RunConfig, data: &DataArg) -> Result<Splits> {
    match &data.data {
        Some(dir) => Ok(Splits {
            train: load_split(&dir.join("train.jsonl"))?,
            test: load_split(&dir.join("test.jsonl"))?,
        }),
        None => {
            let d = Dataset::generate(&cfg.data)?;
            Ok(Splits {
                train: d.train,
                test: d.test,
            })
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            let dir = out_dir(&common, "data")?;
            let (_, manifest) = make_dataset(&cfg.data, &dir)?;
            println!(
                "wrote {} / {} / {} episodes to {}",
                manifest.train.count,
                manifest.val.count,
                manifest.test.count,
                dir.display()
            );
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "train")?;
            let s = splits(&cfg, &data)?;
            let mut model = Model::new(cfg.clone())?;
            let records = fit(&mut model, &s.train)?;
            let hash = cfg.hash();
            write_training_csv(&dir.join("train.csv"), &records, &hash)?;
            save_checkpoint(&model.store, &dir.join("model"))?;
            write_config(&dir.join("config.json"), &cfg)?;
            let m = evaluate(&model, &s.test, super::eval::Scenario::FULL)?;
            println!(
                "{hash} steps {} accuracy {:.4} weighted_f1 {:.4}",
                records.len(),
                m.accuracy,
                m.weighted_f1
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "eval")?;
            let s = splits(&cfg, &data)?;
            let mut model = Model::new(cfg.clone())?;
            load_checkpoint(&mut model.store, &checkpoint)?;
            let eval = scenario_grid(&cfg.eval_keep_ratios)
                .into_iter()
                .map(|sc| evaluate(&model, &s.test, sc))
                .collect::<Result<Vec<_>>>()?;
            for m in &eval {
                println!("{:<14} accuracy {:.4} weighted_f1 {:.4}", m.scenario.name(), m.accuracy, m.weighted_f1);
            }
            let outcome = super::experiments::RunOutcome {
                label: "eval".into(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                records: Vec::new(),
                eval,
                fidelity: Default::default(),
            };
            write_eval_csv(&dir.join("eval.csv"), &outcome)?;
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "ablate")?;
            let data = Dataset::generate(&cfg.data)?;
            let variants = seeded(&ablation_variants(&cfg), seeds.max(1));
            let scenarios = scenario_grid(&[1.0]);
            let outcomes = run_variants(&variants, &data, &scenarios, threads)?;
            write_outcomes(&dir, &outcomes, Some("row_a"))?;
            for o in &outcomes {
                println!("{:<16} seed {} accuracy {:.4}", o.label, o.seed, o.accuracy());
            }
        }
        Command::Sweep { common, axis, seeds } => {
            let cfg = load_config(&common)?;
            let axis = SweepAxis::parse(&axis).map_err(Failure::Config)?;
            let dir = out_dir(&common, &format!("sweep_{}", axis.name()))?;
            let data = Dataset::generate(&cfg.data)?;
            let mut variants = seeded(&axis.variants(&cfg), seeds.max(1));
            for v in &mut variants {
                v.config.validate().map_err(Failure::Config)?;
                v.label = format!("{}_{}", axis.name(), v.label);
            }
            let outcomes = run_variants(&variants, &data, &axis.scenarios(&cfg), threads)?;
            write_outcomes(&dir, &outcomes, None)?;
            for o in &outcomes {
                println!("{:<28} seed {} accuracy {:.4}", o.label, o.seed, o.accuracy());
            }
        }
        Command::DumpAttention {
            common,
            data,
            checkpoint,
            samples,
        } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "attention")?;
            let s = splits(&cfg, &data)?;
            let model = match checkpoint {
                Some(stem) => {
                    let mut m = Model::new(cfg.clone())?;
                    load_checkpoint(&mut m.store, &stem)?;
                    m
                }
                None => {
                    let mut m = Model::new(cfg.clone())?;
                    fit(&mut m, &s.train)?;
                    m
                }
            };
            let rows = dump_attention(&model, &s.test, samples)?;
            let path = dir.join("attention.csv");
            write_attention_csv(&path, &rows)?;
            println!("wrote {} attention rows to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json("config", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
