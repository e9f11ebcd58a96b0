use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{BeliefSource, Components, RunConfig};
use super::eval::{evaluate, imagination_fidelity, EvalMetrics, Scenario};
use super::model::Model;
use super::train::{fit, write_training_csv, MetricsRecord};
use crate::error::{Error, Result};
use crate::ewm::{ImaginationMode, StepFidelity};
use crate::mama::csv_err;
use crate::worldgen::Dataset;

/// Output root: `EWM_LAB_OUT` when set, `out` otherwise.
pub fn output_root() -> PathBuf {
    std::env::var_os("EWM_LAB_OUT").map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

/// Everything one training run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
    pub eval: Vec<EvalMetrics>,
    pub fidelity: StepFidelity,
}

impl RunOutcome {
    pub fn metric(&self, scenario: Scenario) -> Option<&EvalMetrics> {
        self.eval.iter().find(|m| m.scenario == scenario)
    }

    /// Full-modality accuracy at keep ratio 1.
    pub fn accuracy(&self) -> f64 {
        self.metric(Scenario::FULL).map_or(f64::NAN, |m| m.accuracy)
    }
}

/// Train on `data.train`, evaluate every scenario on `data.test`.
pub fn run_experiment(label: &str, config: &RunConfig, data: &Dataset, scenarios: &[Scenario]) -> Result<RunOutcome> {
    let mut model = Model::new(config.clone())?;
    let records = fit(&mut model, &data.train)?;
    let eval = scenarios
        .iter()
        .map(|s| evaluate(&model, &data.test, *s))
        .collect::<Result<Vec<_>>>()?;
    let fidelity = imagination_fidelity(&model, &data.test, config.seed ^ 0x5eed)?;
    Ok(RunOutcome {
        label: label.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        records,
        eval,
        fidelity,
    })
}

/// Run independent jobs on up to `threads` workers; results keep job order.
pub fn run_parallel<T: Send, J: Sync>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// A labelled configuration variant.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// Component rows `a`..`f` plus the random and pooled belief variants.
pub fn ablation_variants(base: &RunConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = "abcdef"
        .chars()
        .map(|c| Variant {
            label: format!("row_{c}"),
            config: RunConfig {
                components: Components::row(c).expect("known row"),
                ..base.clone()
            },
        })
        .collect();
    for (label, source) in [("beliefs_random", BeliefSource::Random), ("beliefs_pooling", BeliefSource::Pooling)] {
        out.push(Variant {
            label: label.into(),
            config: RunConfig {
                components: Components::with_beliefs(source),
                ..base.clone()
            },
        });
    }
    out
}

/// Sweepable mechanism axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RolloutSteps,
    BaseBeliefs,
    ModalityDropout,
    ImaginationWeight,
    ImaginationMode,
    KeepRatio,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown sweep axis `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RolloutSteps => "rollout_steps",
            SweepAxis::BaseBeliefs => "base_beliefs",
            SweepAxis::ModalityDropout => "modality_dropout",
            SweepAxis::ImaginationWeight => "imagination_weight",
            SweepAxis::ImaginationMode => "imagination_mode",
            SweepAxis::KeepRatio => "keep_ratio",
        }
    }

    /// Grid points as `(value label, config)`. The keep-ratio axis trains
    /// once and varies only the evaluation.
    pub fn variants(self, base: &RunConfig) -> Vec<Variant> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Variant { label, config }
        };
        match self {
            SweepAxis::RolloutSteps => (1..=5)
                .map(|s| with(s.to_string(), &|c| c.ewm.rollout_steps = s))
                .collect(),
            SweepAxis::BaseBeliefs => [1, 2, 4, 8, 16]
                .into_iter()
                .map(|n| with(n.to_string(), &|c| c.ewm.base_beliefs = n))
                .collect(),
            SweepAxis::ModalityDropout => [0.0, 0.15, 0.30]
                .into_iter()
                .map(|p| with(p.to_string(), &|c| c.ewm.modality_dropout = p))
                .collect(),
            SweepAxis::ImaginationWeight => [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0]
                .into_iter()
                .map(|w| with(w.to_string(), &|c| c.ewm.imagination_weight = w))
                .collect(),
            SweepAxis::ImaginationMode => [
                ("self_only", ImaginationMode::SelfOnly),
                ("cross_only", ImaginationMode::CrossOnly),
                ("cross", ImaginationMode::Cross),
            ]
            .into_iter()
            .map(|(l, m)| with(l.to_string(), &|c| c.ewm.mode = m))
            .collect(),
            SweepAxis::KeepRatio => vec![with("grid".into(), &|_| {})],
        }
    }

    /// Scenarios each grid point is evaluated on.
    pub fn scenarios(self, base: &RunConfig) -> Vec<Scenario> {
        match self {
            SweepAxis::KeepRatio => super::eval::scenario_grid(&base.eval_keep_ratios),
            SweepAxis::ModalityDropout => super::eval::scenario_grid(&[1.0]),
            _ => vec![Scenario::FULL],
        }
    }
}

/// Seeds of a repeated experiment: `base.seed`, `base.seed + 1`, ...
pub fn seeded(variants: &[Variant], seeds: usize) -> Vec<Variant> {
    let mut out = Vec::with_capacity(variants.len() * seeds);
    for v in variants {
        for k in 0..seeds as u64 {
            let mut config = v.config.clone();
            config.seed = v.config.seed + k;
            out.push(Variant {
                label: v.label.clone(),
                config,
            });
        }
    }
    out
}

/// Train every variant (data shared, init seeds distinct) and collect outcomes.
pub fn run_variants(variants: &[Variant], data: &Dataset, scenarios: &[Scenario], threads: usize) -> Result<Vec<RunOutcome>> {
    run_parallel(variants, threads, |v| run_experiment(&v.label, &v.config, data, scenarios))
}

/// Evaluation rows: one per scenario.
pub fn write_eval_csv(path: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["config_hash", "label", "seed", "scenario", "keep", "accuracy", "weighted_f1", "count"])
        .map_err(|e| csv_err(path, e))?;
    for m in &outcome.eval {
        w.write_record([
            outcome.config_hash.clone(),
            outcome.label.clone(),
            outcome.seed.to_string(),
            m.scenario.name(),
            m.scenario.keep.to_string(),
            m.accuracy.to_string(),
            m.weighted_f1.to_string(),
            m.count.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary rows: one per run and scenario, with per-step fidelity and the
/// accuracy delta against `reference` (same seed) when given.
pub fn write_summary_csv(path: &Path, outcomes: &[RunOutcome], reference: Option<&str>) -> Result<()> {
    let steps = outcomes.iter().map(|o| o.fidelity.cosine.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = [
        "label",
        "seed",
        "config_hash",
        "scenario",
        "accuracy",
        "weighted_f1",
        "delta_accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=steps).map(|s| format!("cos_step{s}")));
    header.extend((1..=steps).map(|s| format!("mse_step{s}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for o in outcomes {
        for m in &o.eval {
            let delta = reference
                .and_then(|r| outcomes.iter().find(|x| x.label == r && x.seed == o.seed))
                .and_then(|x| x.metric(m.scenario))
                .map(|x| (m.accuracy - x.accuracy).to_string())
                .unwrap_or_default();
            let mut row = vec![
                o.label.clone(),
                o.seed.to_string(),
                o.config_hash.clone(),
                m.scenario.name(),
                m.accuracy.to_string(),
                m.weighted_f1.to_string(),
                delta,
            ];
            for s in 0..steps {
                row.push(o.fidelity.cosine.get(s).map(|v| v.to_string()).unwrap_or_default());
            }
            for s in 0..steps {
                row.push(o.fidelity.mse.get(s).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-run training and evaluation CSVs plus a summary CSV and JSON in `dir`.
pub fn write_outcomes(dir: &Path, outcomes: &[RunOutcome], reference: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for o in outcomes {
        let stem = format!("{}_seed{}", o.label, o.seed);
        write_training_csv(&dir.join(format!("{stem}_train.csv")), &o.records, &o.config_hash)?;
        write_eval_csv(&dir.join(format!("{stem}_eval.csv")), o)?;
    }
    write_summary_csv(&dir.join("summary.csv"), outcomes, reference)?;
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(outcomes).map_err(|e| Error::json("summary", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of `f(outcome)` for runs labelled `label`.
pub fn median_by(outcomes: &[RunOutcome], label: &str, f: impl Fn(&RunOutcome) -> f64) -> f64 {
    let v: Vec<f64> = outcomes.iter().filter(|o| o.label == label).map(f).collect();
    median(&v)
}
