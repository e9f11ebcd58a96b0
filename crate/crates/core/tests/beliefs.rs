use ewm_lab::backbone::Role;
use ewm_lab::ewm::{
    build_rollout_context, imagine_rollout, temporal_split, EwmConfig, EwmParams, ImaginationMode, Modality,
    ModalityStream, Phase, Rollout,
};
use ewm_lab::inject::{
    apply_keep_mask, interleave_inject, keep_plan, locate_boundaries, pad_batch, up_project_beliefs, InjectParams,
    InjectPositions,
};
use ewm_lab::mama::{
    aggregate_beliefs, assemble_memory, boundary_residual, export_attention_mass, modality_mass, write_attention_csv,
    MamaParams, Regime, ALPHA_INIT,
};
use ewm_lab::numerics::{Graph, ParamStore, Tensor, Var, IGNORE_INDEX};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DW: usize = 8;

fn ewm_cfg() -> EwmConfig {
    EwmConfig {
        working_dim: DW,
        rollout_steps: 3,
        future_queries: 2,
        heads: 2,
        imagination_layers: 1,
        base_beliefs: 4,
        ..EwmConfig::default()
    }
}

struct World {
    store: ParamStore,
    ewm: EwmParams,
    mama: MamaParams,
}

fn world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ewm = EwmParams::new(&mut store, ewm_cfg(), DW, &mut rng).unwrap();
    let mama = MamaParams::new(&mut store, DW, 4, 2, &mut rng).unwrap();
    World { store, ewm, mama }
}

fn rollouts(g: &Graph, w: &World, present: &[Modality], seed: u64) -> Vec<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = Modality::BOTH.map(|m| {
        present.contains(&m).then(|| {
            let z = g.input(Tensor::randn(&[6, DW], 1.0, &mut rng));
            temporal_split(g, &ModalityStream { modality: m, z, present: true }, 1.0, Phase::Infer).unwrap()
        })
    });
    present
        .iter()
        .map(|&m| {
            let c = build_rollout_context(g, &w.ewm, m, &splits, ImaginationMode::Cross).unwrap();
            imagine_rollout(g, &w.ewm, m, c).unwrap()
        })
        .collect()
}

#[test]
fn memory_size_and_belief_count_follow_the_regime() {
    let w = world(1);
    let g = Graph::with_params(&w.store);
    for (present, regime, n_q) in [
        (vec![Modality::Video, Modality::Audio], Regime::Dual, 8),
        (vec![Modality::Audio], Regime::Single, 4),
        (vec![Modality::Video], Regime::Single, 4),
    ] {
        let rs = rollouts(&g, &w, &present, 2);
        let refs: Vec<&Rollout> = rs.iter().collect();
        let bank = assemble_memory(&g, &w.mama, &refs).unwrap();
        // |modalities| * steps * queries per step
        assert_eq!(g.rows(bank.memory), present.len() * 3 * 2);
        assert_eq!(bank.slots.len(), bank.type_ids.len());
        let state = aggregate_beliefs(&g, &w.mama, &bank, regime).unwrap();
        assert_eq!(g.value(state.beliefs).shape(), &[n_q, DW]);
        assert_eq!(state.attention.shape(), &[n_q, present.len() * 6]);
        for r in 0..n_q {
            let s: f64 = state.attention.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let wrong = if regime == Regime::Dual { Regime::Single } else { Regime::Dual };
        assert!(aggregate_beliefs(&g, &w.mama, &bank, wrong).is_err());
    }
}

#[test]
fn memory_is_video_first_with_one_based_steps() {
    let w = world(3);
    let g = Graph::with_params(&w.store);
    let mut rs = rollouts(&g, &w, &[Modality::Audio, Modality::Video], 4);
    rs.reverse();
    let refs: Vec<&Rollout> = rs.iter().rev().collect();
    let bank = assemble_memory(&g, &w.mama, &refs).unwrap();
    assert_eq!(bank.type_ids, [vec![0; 6], vec![1; 6]].concat());
    let steps: Vec<usize> = bank.slots.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![1, 1, 2, 2, 3, 3, 1, 1, 2, 2, 3, 3]);
    assert_eq!(bank.modalities(), vec![Modality::Video, Modality::Audio]);
}

#[test]
fn attention_export_sums_to_one_per_belief() {
    let w = world(5);
    let g = Graph::with_params(&w.store);
    let rs = rollouts(&g, &w, &[Modality::Video, Modality::Audio], 6);
    let refs: Vec<&Rollout> = rs.iter().collect();
    let bank = assemble_memory(&g, &w.mama, &refs).unwrap();
    let state = aggregate_beliefs(&g, &w.mama, &bank, Regime::Dual).unwrap();
    let rows = export_attention_mass(7, &state, &bank);
    assert_eq!(rows.len(), 8 * 12);
    for b in 0..8 {
        let s: f64 = rows.iter().filter(|r| r.belief_idx == b).map(|r| r.weight).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    for m in modality_mass(&state, &bank) {
        assert!((m[0] + m[1] - 1.0).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("att.csv");
    write_attention_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("sample_id,belief_idx,memory_idx,memory_modality,step,weight"));
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn boundary_residual_matches_a_tensor_oracle() {
    let w = world(7);
    let g = Graph::with_params(&w.store);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let beliefs = g.input(Tensor::randn(&[8, DW], 1.0, &mut rng));
    let bv = Tensor::randn(&[1, DW], 1.0, &mut rng);
    let ba = Tensor::randn(&[1, DW], 1.0, &mut rng);
    let out = boundary_residual(&g, &w.mama, beliefs, &[g.input(bv.clone()), g.input(ba.clone())]).unwrap();
    let wr = w.store.value(w.mama.residual.weight).clone();
    assert_eq!(w.store.value(w.mama.alpha).data(), &[ALPHA_INIT]);
    let mean: Vec<f64> = bv.data().iter().zip(ba.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    let b = g.tensor(beliefs);
    let got = g.tensor(out);
    for r in 0..8 {
        for c in 0..DW {
            let proj: f64 = (0..DW).map(|i| mean[i] * wr.get2(i, c)).sum();
            let want = b.get2(r, c) + ALPHA_INIT * proj;
            assert!((got.get2(r, c) - want).abs() < 1e-12);
        }
    }
    assert!(boundary_residual(&g, &w.mama, beliefs, &[]).is_err());
}

fn layout(video: usize, audio: usize, text: usize) -> Vec<Role> {
    let mut r = vec![Role::System; 2];
    r.extend(std::iter::repeat(Role::Video).take(video));
    r.extend(std::iter::repeat(Role::Audio).take(audio));
    r.extend(std::iter::repeat(Role::Subtitle).take(text));
    r.extend([Role::Question, Role::Question, Role::Answer, Role::Answer]);
    r
}

fn labels_for(roles: &[Role]) -> Vec<i64> {
    roles
        .iter()
        .enumerate()
        .map(|(i, r)| if *r == Role::Answer { 100 + i as i64 } else { IGNORE_INDEX })
        .collect()
}

#[test]
fn keep_examples() {
    let roles = layout(10, 10, 4);
    let plan = keep_plan(&roles, 0.73);
    assert_eq!(plan.kept.len(), roles.len() - 6);
    assert!(keep_plan(&roles, 1.0).is_identity());
    let tiny = keep_plan(&roles, 0.01);
    assert_eq!(tiny.kept.len(), roles.len() - 18);
    let g = Graph::new();
    let emb = g.input(Tensor::zeros(&[roles.len(), 4]));
    assert!(apply_keep_mask(&g, emb, &roles, 0.0).is_err());
    assert!(apply_keep_mask(&g, emb, &roles, 1.5).is_err());
}

proptest! {
    #[test]
    fn keep_plan_truncates_only_audiovisual_tails(v in 1usize..14, a in 1usize..14, t in 1usize..6, keep in 0.05f64..=1.0) {
        let roles = layout(v, a, t);
        let plan = keep_plan(&roles, keep);
        let expect = |len: usize| ((keep * len as f64).floor() as usize).clamp(1, len);
        let kept_roles: Vec<Role> = plan.kept.iter().map(|&i| roles[i]).collect();
        let count = |r: Role| kept_roles.iter().filter(|&&x| x == r).count();
        prop_assert_eq!(count(Role::Video), expect(v));
        prop_assert_eq!(count(Role::Audio), expect(a));
        prop_assert_eq!(count(Role::Subtitle), t);
        prop_assert_eq!(count(Role::Answer), 2);
        // Kept video and audio are prefixes of their regions.
        prop_assert_eq!(&plan.kept[2..2 + expect(v)], &(2..2 + expect(v)).collect::<Vec<_>>()[..]);
        prop_assert!(plan.kept.windows(2).all(|w| w[0] < w[1]));
        for (new, &old) in plan.kept.iter().enumerate() {
            prop_assert_eq!(plan.relocate(old), Some(new));
        }
    }

    #[test]
    fn injection_layout_invariants(v in 1usize..8, a in 0usize..8, n_q in 1usize..9, keep in 0.1f64..=1.0, single in any::<bool>()) {
        let roles = layout(v, a, 3);
        let labels = labels_for(&roles);
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(n_q as u64);
        let emb = g.input(Tensor::randn(&[roles.len(), 4], 1.0, &mut rng));
        let (rows, plan) = apply_keep_mask(&g, emb, &roles, keep).unwrap();
        let kroles: Vec<Role> = plan.kept.iter().map(|&i| roles[i]).collect();
        let klabels: Vec<i64> = plan.kept.iter().map(|&i| labels[i]).collect();
        let beliefs = g.input(Tensor::randn(&[n_q, 4], 1.0, &mut rng));
        let positions = if single { InjectPositions::Single } else { InjectPositions::Interleaved };
        let aug = interleave_inject(&g, rows, &kroles, &klabels, Some(beliefs), positions).unwrap();
        prop_assert_eq!(aug.len(), kroles.len() + n_q);
        prop_assert_eq!(g.rows(aug.rows), aug.len());
        let bp = aug.belief_positions();
        prop_assert_eq!(bp.len(), n_q);
        for &p in &bp {
            prop_assert_eq!(aug.labels[p], IGNORE_INDEX);
            prop_assert!(aug.mask[p]);
        }
        let (p_av, p_ans) = locate_boundaries(&kroles).unwrap();
        let first = if single { n_q } else { n_q.div_ceil(2) };
        prop_assert_eq!(bp[0], p_av);
        prop_assert!(bp[..first].windows(2).all(|w| w[1] == w[0] + 1));
        if first < n_q {
            prop_assert_eq!(*bp.last().unwrap(), p_ans + n_q - 1);
            prop_assert_eq!(aug.roles[p_ans + n_q], Role::Answer);
        }
        // Original rows survive, in order, with their labels.
        let out = g.tensor(aug.rows);
        let src = g.tensor(rows);
        for (old, &new) in aug.index_map.iter().enumerate() {
            prop_assert_eq!(out.row(new), src.row(old));
            prop_assert_eq!(aug.labels[new], klabels[old]);
        }
        let answers: Vec<i64> = aug.labels.iter().copied().filter(|&l| l != IGNORE_INDEX).collect();
        let before: Vec<i64> = labels.iter().copied().filter(|&l| l != IGNORE_INDEX).collect();
        prop_assert_eq!(answers, before);
    }
}

#[test]
fn full_keep_without_beliefs_is_the_vanilla_sequence() {
    let roles = layout(5, 5, 3);
    let labels = labels_for(&roles);
    let g = Graph::new();
    let emb = g.input(Tensor::randn(&[roles.len(), 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let (rows, plan) = apply_keep_mask(&g, emb, &roles, 1.0).unwrap();
    assert!(plan.is_identity());
    let aug = interleave_inject(&g, rows, &roles, &labels, None, InjectPositions::Interleaved).unwrap();
    assert_eq!(*g.value(aug.rows), *g.value(emb));
    assert_eq!(aug.roles, roles);
    assert_eq!(aug.labels, labels);
    assert!(aug.mask.iter().all(|&m| m));
}

#[test]
fn padding_appends_masked_ignored_rows() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let items: Vec<_> = [(3, 2), (6, 6), (1, 4)]
        .iter()
        .map(|&(v, a)| {
            let roles = layout(v, a, 2);
            let labels = labels_for(&roles);
            let rows = g.input(Tensor::randn(&[roles.len(), 4], 1.0, &mut rng));
            interleave_inject(&g, rows, &roles, &labels, None, InjectPositions::Interleaved).unwrap()
        })
        .collect();
    let lens: Vec<usize> = items.iter().map(|a| a.len()).collect();
    let padded = pad_batch(&g, items.clone()).unwrap();
    let longest = *lens.iter().max().unwrap();
    for (orig, p) in items.iter().zip(&padded) {
        assert_eq!(p.len(), longest);
        assert_eq!(g.rows(p.rows), longest);
        let v = g.tensor(p.rows);
        for i in orig.len()..longest {
            assert_eq!(p.roles[i], Role::Pad);
            assert_eq!(p.labels[i], IGNORE_INDEX);
            assert!(!p.mask[i]);
            assert!(v.row(i).iter().all(|&x| x == 0.0));
        }
        assert_eq!(&p.labels[..orig.len()], &orig.labels[..]);
    }
}

#[test]
fn up_projection_is_normalised_to_the_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let p = InjectParams::new(&mut store, DW, 12, 0.5, &mut rng).unwrap();
    let g = Graph::with_params(&store);
    let b: Var = g.input(Tensor::randn(&[8, DW], 1.0, &mut rng));
    let out = g.tensor(up_project_beliefs(&g, &p, b).unwrap());
    assert_eq!(out.shape(), &[8, 12]);
    for r in 0..8 {
        let row = out.row(r);
        let mean = row.iter().sum::<f64>() / 12.0;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 0.5).abs() < 1e-3, "row std {}", var.sqrt());
    }
}
