//! Acceptance suite. `structural_criteria` covers gradients, oracles and
//! invariants and runs with every `cargo test`. `trend_criteria` trains 27
//! desk-scale models and is opt-in:
//!
//! ```text
//! cargo test --release --test acceptance -- --ignored --nocapture
//! ```
//!
//! `EWM_ACCEPTANCE_CONFIG` names a JSON run config to use as the base
//! instead of the defaults.

use std::time::Instant;

use ewm_lab::backbone::Role;
use ewm_lab::ewm::{
    build_rollout_context, imagination_loss, imagine_rollout, temporal_split, EwmConfig, EwmParams, ImaginationMode,
    Modality, ModalityStream, Phase, SplitResult,
};
use ewm_lab::harness::{
    fit, median, output_root, run_variants, seeded, step_loss, weighted_f1, write_outcomes, BeliefSource, Components,
    Model, RunConfig, RunOutcome, Scenario, Variant,
};
use ewm_lab::inject::keep_plan;
use ewm_lab::mama::Regime;
use ewm_lab::numerics::{
    adaptive_avg_pool_1d, finite_difference_check, AttnMask, Graph, Init, ParamId, ParamStore, Tensor, Var,
    COSINE_EPS, IGNORE_INDEX,
};
use ewm_lab::worldgen::{Corruption, Dataset, Episode, GenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdicts(Vec<(u32, bool)>);

impl Verdicts {
    fn record(&mut self, n: u32, pass: bool, detail: String) {
        println!("criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push((n, pass));
    }

    fn assert_all(&self) {
        let failed: Vec<u32> = self.0.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Move parameters off their init so the check runs at a generic point.
fn spread(store: &mut ParamStore, ids: &[ParamId], std: f64, seed: u64) {
    let mut r = rng(seed);
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, std, &mut r);
    }
}

type Loss = Box<dyn Fn(&Graph) -> ewm_lab::Result<Var>>;

/// Every differentiable op, one small scalar loss each.
fn op_gradients() -> Vec<(&'static str, f64)> {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let gauss = Init::Gaussian { std: 1.0 };
    let a = store.register("a", &[3, 4], gauss, true, &mut r).unwrap();
    let b = store.register("b", &[4, 5], gauss, true, &mut r).unwrap();
    let c = store.register("c", &[3, 4], gauss, true, &mut r).unwrap();
    let row = store.register("row", &[4], gauss, true, &mut r).unwrap();
    let s = store.register("s", &[1], gauss, true, &mut r).unwrap();
    let kv = store.register("kv", &[5, 4], gauss, true, &mut r).unwrap();
    let w34 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w35 = Tensor::randn(&[3, 5], 1.0, &mut r);
    let weigh = move |g: &Graph, x: Var, w: &Tensor| g.sum(g.mul(x, g.constant(w.clone())?)?);
    let cases: Vec<(&str, Loss)> = vec![
        ("matmul", Box::new({
            let w = w35.clone();
            move |g| weigh(g, g.matmul(g.param(a), g.param(b))?, &w)
        })),
        ("matmul_bt", Box::new({
            let w = w35.clone();
            move |g| weigh(g, g.matmul_bt(g.param(a), g.param(kv))?, &w)
        })),
        ("softmax_rows", Box::new({
            let w = w35.clone();
            move |g| weigh(g, g.softmax_rows(g.matmul(g.param(a), g.param(b))?)?, &w)
        })),
        ("add", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.add(g.param(a), g.param(c))?, &w)
        })),
        ("sub", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.sub(g.param(a), g.param(c))?, &w)
        })),
        ("mul", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.mul(g.param(a), g.param(c))?, &w)
        })),
        ("add_row", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.add_row(g.param(a), g.param(row))?, &w)
        })),
        ("scale", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.scale(g.param(a), -1.7)?, &w)
        })),
        ("scale_by", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.scale_by(g.param(a), g.param(s))?, &w)
        })),
        ("mean", Box::new(move |g| g.mean(g.mul(g.param(a), g.param(c))?))),
        ("add_n", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.add_n(&[g.param(a), g.param(c), g.param(a)])?, &w)
        })),
        ("layer_norm", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.layer_norm(g.param(a), g.param(row), g.param(row), 1e-5)?, &w)
        })),
        ("gelu", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.gelu(g.param(a))?, &w)
        })),
        ("concat_rows+slice_rows", Box::new({
            let w = w34.clone();
            move |g| {
                let cat = g.concat_rows(&[g.param(a), g.param(c)])?;
                weigh(g, g.slice_rows(cat, 2, 5)?, &w)
            }
        })),
        ("gather_rows", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.gather_rows(g.param(a), &[2, 0, 2])?, &w)
        })),
        ("adaptive_avg_pool", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.adaptive_avg_pool(g.param(kv), 3)?, &w)
        })),
        ("attention", Box::new({
            let w = w34.clone();
            move |g| weigh(g, g.attention(g.param(a), g.param(kv), g.param(kv), 2, &AttnMask::None)?, &w)
        })),
        ("masked causal attention", Box::new({
            let w = w34.clone();
            move |g| {
                let mask = AttnMask::CausalKeys(vec![true, false, true]);
                weigh(g, g.attention(g.param(a), g.param(c), g.param(c), 2, &mask)?, &w)
            }
        })),
        ("mse", Box::new({
            let t = w34.clone();
            move |g| g.mse(g.param(a), g.constant(t.clone())?)
        })),
        ("cosine_alignment", Box::new(move |g| g.cosine_alignment(g.param(a), g.param(c), COSINE_EPS))),
        ("cross_entropy", Box::new(move |g| Ok(g.cross_entropy(g.matmul(g.param(a), g.param(b))?, &[4, IGNORE_INDEX, 1])?.0))),
    ];
    let ids: Vec<ParamId> = store.ids().collect();
    cases
        .into_iter()
        .map(|(name, f)| (name, finite_difference_check(&mut store, &ids, 1e-4, f).unwrap()))
        .collect()
}

/// Imagination loss through bottleneck, split, rollout and alignment, with
/// the stop-gradient targets frozen.
fn imagination_gradient() -> f64 {
    let d = 8;
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let cfg = EwmConfig {
        working_dim: 8,
        heads: 2,
        future_queries: 2,
        imagination_layers: 1,
        ..EwmConfig::default()
    };
    let ewm = EwmParams::new(&mut store, cfg, d, &mut r).unwrap();
    let gauss = Init::Gaussian { std: 1.0 };
    let hidden = [
        store.register("h.video", &[6, d], gauss, true, &mut r).unwrap(),
        store.register("h.audio", &[7, d], gauss, true, &mut r).unwrap(),
    ];
    let all: Vec<ParamId> = store.ids().collect();
    spread(&mut store, &all, 0.5, 3);
    let ids: Vec<ParamId> = all.into_iter().filter(|&id| !store.get(id).name.ends_with("wk.bias")).collect();
    let splits = |g: &Graph| -> [Option<SplitResult>; 2] {
        Modality::BOTH.map(|m| {
            let z = ewm_lab::ewm::bottleneck_project(g, &ewm, g.param(hidden[m.index()]), m).unwrap();
            Some(temporal_split(g, &ModalityStream { modality: m, z, present: true }, 0.75, Phase::Train).unwrap())
        })
    };
    let frozen: Vec<Tensor> = {
        let g = Graph::with_params(&store);
        splits(&g).iter().map(|s| g.tensor(s.unwrap().fut.unwrap())).collect()
    };
    finite_difference_check(&mut store, &ids, 1e-4, |g| {
        let s = splits(g);
        let mut pairs = Vec::new();
        for m in Modality::BOTH {
            let ctx = build_rollout_context(g, &ewm, m, &s, ImaginationMode::Cross)?;
            pairs.push((imagine_rollout(g, &ewm, m, ctx)?, g.constant(frozen[m.index()].clone())?));
        }
        let refs: Vec<_> = pairs.iter().map(|(r, t)| (r, *t)).collect();
        Ok(imagination_loss(g, &refs, 2)?.loss)
    })
    .unwrap()
}

fn toy(components: Components) -> RunConfig {
    let mut cfg = RunConfig {
        data: GenConfig {
            states: 2,
            seq_len: 6,
            codebook: 4,
            words_per_state: 2,
            train: 8,
            val: 2,
            test: 4,
            ..GenConfig::default()
        },
        components,
        steps: 10,
        batch_size: 2,
        ..RunConfig::default()
    };
    cfg.backbone.d = 8;
    cfg.backbone.heads = 2;
    cfg.backbone.layers = 1;
    cfg.backbone.lora_rank = 2;
    cfg.ewm.working_dim = 8;
    cfg.ewm.heads = 2;
    cfg.ewm.future_queries = 2;
    cfg.ewm.base_beliefs = 2;
    cfg.ewm.modality_dropout = 0.0;
    cfg
}

/// Total loss on a two-episode batch, for the parameters `select` picks.
/// The belief path needs a wide spread to leave the flat region of the
/// cosine; the backbone a narrow one, or attention saturates and its
/// gradients shrink to the size of rounding noise.
fn total_loss_gradient(cfg: RunConfig, std: f64, select: impl Fn(&str) -> bool) -> f64 {
    let data = Dataset::generate(&cfg.data).unwrap();
    let mut model = Model::new(cfg).unwrap();
    let mut store = std::mem::take(&mut model.store);
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| select(&store.get(id).name) && !store.get(id).name.ends_with("wk.bias"))
        .collect();
    spread(&mut store, &ids, std, 4);
    let batch: Vec<&Episode> = data.train.iter().take(2).collect();
    finite_difference_check(&mut store, &ids, 1e-4, |g| Ok(step_loss(&model, g, &batch, &mut rng(5))?.total)).unwrap()
}

fn criterion_1(v: &mut Verdicts) {
    let t = Instant::now();
    let ops = op_gradients();
    let (worst_op, op_err) = ops.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let img = imagination_gradient();
    // Stop-gradient targets depend on the backbone and the bottleneck, so
    // the total loss is checked in three slices that together cover every
    // parameter.
    let full = toy(Components::full());
    let belief_path = total_loss_gradient(full.clone(), 0.5, |n| !n.starts_with("thinker.") && !n.starts_with("ewm.down."));
    let mut lm_only = full;
    lm_only.ewm.imagination_weight = 0.0;
    let bottleneck = total_loss_gradient(lm_only, 0.5, |n| n.starts_with("ewm.down."));
    let backbone = total_loss_gradient(toy(Components::baseline()), 0.2, |n| n.starts_with("thinker."));
    let total = belief_path.max(bottleneck).max(backbone);
    let secs = t.elapsed().as_secs_f64();
    let pass = op_err < 1e-4 && img < 1e-4 && total < 1e-4 && secs < 60.0;
    v.record(
        1,
        pass,
        format!(
            "ops max {op_err:.2e} ({worst_op}, {} ops), imagination {img:.2e}, total {total:.2e}, {secs:.1}s",
            ops.len()
        ),
    );
}

fn pool_oracle(x: &Tensor, n: usize) -> Vec<Vec<f64>> {
    let l = x.shape()[0];
    (0..n)
        .map(|i| {
            let start = i * l / n;
            let end = ((i + 1) * l).div_ceil(n).max(start + 1);
            let mut acc = vec![0.0; x.shape()[1]];
            for r in start..end {
                for (a, v) in acc.iter_mut().zip(x.row(r)) {
                    *a += v;
                }
            }
            acc.into_iter().map(|s| s / (end - start) as f64).collect()
        })
        .collect()
}

fn f1_oracle(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut score = 0.0;
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        let support = tp + fn_;
        if support > 0.0 && tp > 0.0 {
            score += support / truth.len() as f64 * (2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }
    score
}

fn criterion_2(v: &mut Verdicts) {
    let t = Instant::now();
    let mut r = rng(6);
    let mut pool_mismatch = 0;
    for l in 1..=12 {
        let x = Tensor::randn(&[l, 5], 1.0, &mut r);
        for n in 1..=12 {
            let got = adaptive_avg_pool_1d(&x, n).unwrap();
            let want = pool_oracle(&x, n);
            pool_mismatch += (0..n).filter(|&i| got.row(i) != &want[i][..]).count();
        }
    }
    let mut f1_err: f64 = 0.0;
    for _ in 0..100 {
        let classes = r.gen_range(2..7);
        let n = r.gen_range(1..80);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let pred: Vec<usize> = truth.iter().map(|&y| if r.gen_bool(0.5) { y } else { r.gen_range(0..classes) }).collect();
        f1_err = f1_err.max((weighted_f1(&truth, &pred, classes) - f1_oracle(&truth, &pred, classes)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = pool_mismatch == 0 && f1_err < 1e-12 && secs < 10.0;
    v.record(2, pass, format!("pool mismatched rows {pool_mismatch}/1014, f1 max error {f1_err:.1e}, {secs:.2}s"));
}

fn criterion_10(v: &mut Verdicts) {
    let t = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let mut r = rng(7);

    // Full keep is the identity on any layout.
    for _ in 0..200 {
        let mut roles = vec![Role::System];
        roles.extend(std::iter::repeat(Role::Video).take(r.gen_range(0..20)));
        roles.extend(std::iter::repeat(Role::Audio).take(r.gen_range(0..20)));
        roles.extend([Role::Subtitle, Role::Question, Role::Answer]);
        check(keep_plan(&roles, 1.0).is_identity(), "keep 1.0 truncated");
    }

    // Inference layout, belief labels and counts on the default config.
    let cfg = RunConfig::default();
    let data = Dataset::generate(&GenConfig { train: 4, val: 2, test: 6, ..cfg.data.clone() }).unwrap();
    let model = Model::new(cfg.clone()).unwrap();
    let nb = cfg.ewm.base_beliefs;
    check(Regime::Dual.belief_count(nb) == 8 && Regime::Single.belief_count(nb) == 4, "belief counts");
    for ep in &data.test {
        for corruption in [Corruption::None, Corruption::DropVideo, Corruption::DropAudio] {
            let e = ewm_lab::worldgen::corrupt_modality(ep, corruption).unwrap();
            let present = [!e.video.is_empty(), !e.audio.is_empty()];
            let seq = model.sequence(&e, present, Some(e.label)).unwrap();
            let g = Graph::inference(&model.store);
            let hidden = model.thinker.forward(&g, &seq.prefix()).unwrap();
            let out = model.beliefs(&g, &hidden, present, 1.0, Phase::Infer).unwrap();
            let modalities = present.iter().filter(|&&p| p).count();
            let n_q = if modalities == 2 { 8 } else { 4 };
            let (state, bank) = out.aggregation.as_ref().unwrap();
            check(g.rows(bank.memory) == modalities * cfg.ewm.rollout_steps * cfg.ewm.future_queries, "memory size");
            check(state.attention.shape()[0] == n_q, "belief rows");
            let aug = &model.lm_logits(&g, &[(seq.clone(), 1.0, out.injected)]).unwrap()[0];
            check(aug.len() == seq.len() + n_q, "augmented length");
            let positions = aug.belief_positions();
            check(positions.len() == n_q, "belief positions");
            check(positions.iter().all(|&p| aug.labels[p] == IGNORE_INDEX && aug.mask[p]), "belief label or mask");
        }
    }

    // Detached futures receive no gradient from the imagination loss.
    {
        let mut store = ParamStore::new();
        let ecfg = EwmConfig { working_dim: 8, heads: 2, future_queries: 2, ..EwmConfig::default() };
        let ewm = EwmParams::new(&mut store, ecfg, 8, &mut r).unwrap();
        let g = Graph::with_params(&store);
        let zs = [g.input(Tensor::randn(&[8, 8], 1.0, &mut r)), g.input(Tensor::randn(&[8, 8], 1.0, &mut r))];
        let splits = Modality::BOTH.map(|m| {
            let s = ModalityStream { modality: m, z: zs[m.index()], present: true };
            Some(temporal_split(&g, &s, 0.75, Phase::Train).unwrap())
        });
        let rollouts: Vec<_> = Modality::BOTH
            .iter()
            .map(|&m| {
                let c = build_rollout_context(&g, &ewm, m, &splits, ImaginationMode::Cross).unwrap();
                imagine_rollout(&g, &ewm, m, c).unwrap()
            })
            .collect();
        let pairs: Vec<_> = rollouts.iter().zip(&splits).map(|(ro, s)| (ro, s.unwrap().fut.unwrap())).collect();
        let loss = imagination_loss(&g, &pairs, 2).unwrap().loss;
        let grads = g.backward(loss).unwrap();
        for z in zs {
            let gz = grads.wrt(z).unwrap();
            check(gz.data()[48..].iter().all(|&x| x == 0.0), "future rows got gradient");
            check(gz.data()[..48].iter().any(|&x| x != 0.0), "past rows got no gradient");
        }
    }

    // Zero-initialised adapters leave the backbone function untouched.
    {
        let seq = model.sequence(&data.test[0], [true, true], Some(0)).unwrap();
        let logits = |store: &ParamStore| {
            let g = Graph::inference(store);
            let h = model.thinker.forward(&g, &seq).unwrap();
            g.tensor(model.thinker.logits(&g, h.h).unwrap())
        };
        let reference = logits(&model.store);
        let mut store = model.store.clone();
        for a in model.thinker.lora_adapters() {
            let shape = store.value(a.a).shape().to_vec();
            *store.value_mut(a.a) = Tensor::randn(&shape, 1.0, &mut r);
        }
        check(logits(&store) == reference, "zero-init LoRA changed logits");
    }

    // Ten training steps, twice, bit for bit.
    {
        let cfg = toy(Components::full());
        let data = Dataset::generate(&cfg.data).unwrap();
        let trace = || {
            let mut m = Model::new(cfg.clone()).unwrap();
            let records = fit(&mut m, &data.train).unwrap();
            let bits: Vec<u64> = records
                .iter()
                .flat_map(|r| [r.loss_lm.to_bits(), r.loss_total.to_bits()])
                .chain(m.store.ids().flat_map(|id| m.store.value(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect();
            bits
        };
        check(trace() == trace(), "training trace differs");
    }

    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let detail = if failures.is_empty() { "all invariants hold".to_string() } else { failures.join(", ") };
    v.record(10, pass, format!("{detail}, {secs:.1}s"));
}

#[test]
fn structural_criteria() {
    let mut v = Verdicts(Vec::new());
    criterion_1(&mut v);
    criterion_2(&mut v);
    criterion_10(&mut v);
    v.assert_all();
}

const SEEDS: usize = 3;

fn variant(label: &str, base: &RunConfig, f: impl Fn(&mut RunConfig)) -> Variant {
    let mut config = base.clone();
    f(&mut config);
    Variant { label: label.into(), config }
}

struct Runs(Vec<RunOutcome>);

impl Runs {
    fn of(&self, label: &str) -> Vec<&RunOutcome> {
        self.0.iter().filter(|o| o.label == label).collect()
    }

    fn median(&self, label: &str, scenario: Scenario) -> f64 {
        let accs: Vec<f64> = self.of(label).iter().map(|o| o.metric(scenario).unwrap().accuracy).collect();
        median(&accs)
    }

    fn accs(&self, label: &str) -> String {
        let a: Vec<String> = self.of(label).iter().map(|o| format!("{:.4}", o.accuracy())).collect();
        a.join("/")
    }
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[test]
#[ignore = "trains 27 desk-scale models; run with --ignored"]
fn trend_criteria() {
    let started = Instant::now();
    let base = match std::env::var_os("EWM_ACCEPTANCE_CONFIG") {
        Some(path) => RunConfig::load(std::path::Path::new(&path)).unwrap(),
        None => RunConfig::default(),
    };
    println!("base config {}", base.hash());
    let data = Dataset::generate(&base.data).unwrap();
    let full_at = |keep| Scenario { corruption: Corruption::None, keep };
    let no_video = Scenario { corruption: Corruption::DropVideo, keep: 1.0 };
    let no_audio = Scenario { corruption: Corruption::DropAudio, keep: 1.0 };
    let beliefs = |s| move |c: &mut RunConfig| c.components = Components::with_beliefs(s);
    let mode = |m| move |c: &mut RunConfig| c.ewm.mode = m;

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut outcomes = Vec::new();
    let mut run = |variants: Vec<Variant>, scenarios: &[Scenario]| {
        let t = Instant::now();
        let out = run_variants(&seeded(&variants, SEEDS), &data, scenarios, threads).unwrap();
        for o in &out {
            println!("  {:<12} seed {} accuracy {:.4} ({:.0}s batch)", o.label, o.seed, o.accuracy(), t.elapsed().as_secs_f64());
        }
        outcomes.extend(out);
    };
    run(
        vec![variant("ewm", &base, |_| {})],
        &[full_at(1.0), full_at(0.1), no_video, no_audio],
    );
    run(vec![variant("drop_0", &base, |c| c.ewm.modality_dropout = 0.0)], &[full_at(1.0), no_video, no_audio]);
    run(
        vec![
            variant("none", &base, beliefs(BeliefSource::None)),
            variant("random", &base, beliefs(BeliefSource::Random)),
            variant("pooling", &base, beliefs(BeliefSource::Pooling)),
            variant("self_only", &base, mode(ImaginationMode::SelfOnly)),
            variant("cross_only", &base, mode(ImaginationMode::CrossOnly)),
            variant("steps_1", &base, |c| c.ewm.rollout_steps = 1),
            variant("weight_0", &base, |c| c.ewm.imagination_weight = 0.0),
        ],
        &[full_at(1.0)],
    );
    let runs = Runs(outcomes);
    write_outcomes(&output_root().join("acceptance"), &runs.0, Some("none")).unwrap();
    let full = full_at(1.0);
    let acc = |l: &str| runs.median(l, full);
    let mut v = Verdicts(Vec::new());

    let (ewm, pool, rand, none) = (acc("ewm"), acc("pooling"), acc("random"), acc("none"));
    v.record(
        3,
        ewm > pool && pool >= rand && rand >= none && ewm - none >= 0.02,
        format!(
            "median ewm {} pooling {} random {} none {}, ewm-none {:+} pts (need > >= >= and +2.00) [ewm {} none {}]",
            pts(ewm), pts(pool), pts(rand), pts(none), pts(ewm - none), runs.accs("ewm"), runs.accs("none")
        ),
    );

    let (selfm, cross_only) = (acc("self_only"), acc("cross_only"));
    v.record(
        4,
        ewm - selfm >= 0.01 && cross_only >= selfm,
        format!(
            "median cross {} self {} cross_only {}, cross-self {:+} pts (need +1.00), cross_only-self {:+}",
            pts(ewm), pts(selfm), pts(cross_only), pts(ewm - selfm), pts(cross_only - selfm)
        ),
    );

    // Fidelity is measured on held-out episodes after training at S=3.
    let step_cos: Vec<f64> = (0..3)
        .map(|s| median(&runs.of("ewm").iter().map(|o| o.fidelity.cosine[s]).collect::<Vec<_>>()))
        .collect();
    let per_seed_ok = runs.of("ewm").iter().all(|o| o.fidelity.cosine[0] >= o.fidelity.cosine[2] - 0.005);
    v.record(
        5,
        per_seed_ok && step_cos[0] > step_cos[1] && step_cos[1] > step_cos[2],
        format!("median cosine by step {:.4} > {:.4} > {:.4}, per-seed cos1 >= cos3 - 0.005: {per_seed_ok}", step_cos[0], step_cos[1], step_cos[2]),
    );

    let s1 = acc("steps_1");
    v.record(6, ewm >= s1, format!("median S=3 {} vs S=1 {}", pts(ewm), pts(s1)));

    let gap = |l: &str| runs.median(l, full) - runs.median(l, no_video).min(runs.median(l, no_audio));
    let (gap_15, gap_0) = (gap("ewm"), gap("drop_0"));
    let d0 = acc("drop_0");
    v.record(
        7,
        gap_15 < gap_0 && (ewm - d0).abs() <= 0.02,
        format!(
            "missing-modality gap p=0.15 {} vs p=0 {} pts, full accuracy {} vs {}",
            pts(gap_15), pts(gap_0), pts(ewm), pts(d0)
        ),
    );

    let w0 = acc("weight_0");
    v.record(8, ewm > w0, format!("median lambda=1 {} vs lambda=0 {}", pts(ewm), pts(w0)));

    let short = runs.median("ewm", full_at(0.1));
    v.record(
        9,
        short >= 0.9 * ewm,
        format!("median keep 0.1 {} vs keep 1.0 {} ({:.1}% of full)", pts(short), pts(ewm), 100.0 * short / ewm),
    );
    println!("trend suite: {:.0}s", started.elapsed().as_secs_f64());
    v.assert_all();
}
