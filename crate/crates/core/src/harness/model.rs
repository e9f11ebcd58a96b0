use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneMode, BeliefSource, RunConfig};
use crate::backbone::{assemble_template, EMBED_STD, HiddenStates, Role, TemplateInput, Thinker, TokenSequence, VocabLayout};
use crate::error::{Result, StageExt};
use crate::ewm::{
    bottleneck_project, build_rollout_context, imagination_loss, imagine_rollout, temporal_split, EwmParams,
    ImaginationLoss, Modality, ModalityStream, Phase, Rollout, SplitResult,
};
use crate::inject::{answer_labels, interleave_inject, pad_batch, up_project_beliefs, AugmentedSequence, InjectLayer, InjectParams};
use crate::mama::{aggregate_beliefs, assemble_memory, boundary_residual, BeliefState, MamaParams, MemoryBank, Regime};
use crate::numerics::{Graph, OptimizerState, ParamId, ParamStore, Tensor, Var};
use crate::worldgen::Episode;

/// Backbone plus whichever belief machinery the components ask for.
pub struct Model {
    pub config: RunConfig,
    pub layout: VocabLayout,
    pub store: ParamStore,
    pub thinker: Thinker,
    pub ewm: Option<EwmParams>,
    pub mama: Option<MamaParams>,
    pub inject: Option<InjectParams>,
    /// Frozen belief rows for the random-token variant, per regime.
    pub random_beliefs: Option<[Tensor; 2]>,
    pub optimizer: OptimizerState,
}

impl Model {
    /// Parameters are created in a fixed order from `config.seed`, backbone
    /// first, so variants that share a seed share the backbone init.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let thinker = Thinker::new(&mut store, config.thinker(), &mut rng)?;
        let comp = &config.components;
        let dw = config.ewm.working_dim;
        let ewm = if comp.uses_ewm() {
            Some(EwmParams::new(&mut store, config.ewm.clone(), config.backbone.d, &mut rng)?)
        } else {
            None
        };
        let mama = if comp.beliefs == BeliefSource::Imagined {
            Some(MamaParams::new(&mut store, dw, config.ewm.base_beliefs, config.ewm.heads, &mut rng)?)
        } else {
            None
        };
        let inject = if comp.beliefs != BeliefSource::None {
            let gain = match comp.inject_layer {
                InjectLayer::Embedding => EMBED_STD,
                InjectLayer::FinalHidden => 1.0,
            };
            Some(InjectParams::new(&mut store, dw, config.backbone.d, gain, &mut rng)?)
        } else {
            None
        };
        let random_beliefs = (comp.beliefs == BeliefSource::Random).then(|| {
            let nb = config.ewm.base_beliefs;
            [Tensor::randn(&[nb, dw], 1.0, &mut rng), Tensor::randn(&[2 * nb, dw], 1.0, &mut rng)]
        });
        if config.backbone.mode == BackboneMode::FrozenLora {
            for id in thinker.base_param_ids(&store) {
                store.set_requires_grad(id, false);
            }
        }
        let optimizer = OptimizerState::new(config.adamw(), &store, store.trainable());
        Ok(Self {
            config,
            layout,
            store,
            thinker,
            ewm,
            mama,
            inject,
            random_beliefs,
            optimizer,
        })
    }

    pub fn trainable(&self) -> &[ParamId] {
        self.optimizer.param_ids()
    }

    /// Template for an episode, leaving out modalities marked absent.
    pub fn sequence(&self, ep: &Episode, present: [bool; 2], answer: Option<usize>) -> Result<TokenSequence> {
        let input = TemplateInput {
            video: if present[0] { &ep.video } else { &[] },
            audio: if present[1] { &ep.audio } else { &[] },
            subtitle: &ep.text,
            answer,
        };
        assemble_template(&self.layout, &input, self.config.backbone.max_seq_len)
    }
}

/// Beliefs and everything produced on the way.
#[derive(Default)]
pub struct BeliefOutput {
    /// Up-projected belief rows `[N_q x d]`.
    pub injected: Option<Var>,
    pub imagination: Option<ImaginationLoss>,
    pub rollouts: Vec<Rollout>,
    pub aggregation: Option<(BeliefState, MemoryBank)>,
}

impl Model {
    /// Bottleneck, split, imagine, aggregate and lift, from backbone hidden
    /// states. `present` already reflects dropout or corruption.
    pub fn beliefs(
        &self,
        g: &Graph,
        hidden: &HiddenStates,
        present: [bool; 2],
        keep: f64,
        phase: Phase,
    ) -> Result<BeliefOutput> {
        let comp = &self.config.components;
        let Some(ewm) = &self.ewm else {
            return Ok(BeliefOutput::default());
        };
        let mut splits: [Option<SplitResult>; 2] = [None, None];
        for m in Modality::BOTH {
            if !present[m.index()] {
                continue;
            }
            let role = if m == Modality::Video { Role::Video } else { Role::Audio };
            let Some(h) = hidden.extract(g, role).stage(2, "extract audiovisual states")? else {
                continue;
            };
            // The full-observation pass only forms inputs and targets; the
            // backbone learns from the LM loss on the partial pass.
            let z = bottleneck_project(g, ewm, g.detach(h), m).stage(5, "bottleneck")?;
            let stream = ModalityStream {
                modality: m,
                z,
                present: true,
            };
            splits[m.index()] = Some(temporal_split(g, &stream, keep, phase).stage(6, "temporal split")?);
        }
        let available: Vec<Modality> = Modality::BOTH.into_iter().filter(|m| splits[m.index()].is_some()).collect();
        if available.is_empty() {
            return Ok(BeliefOutput::default());
        }
        let mut out = BeliefOutput::default();
        let needs_rollout = comp.imagination || comp.beliefs == BeliefSource::Imagined;
        if needs_rollout {
            for &m in &available {
                let ctx = build_rollout_context(g, ewm, m, &splits, ewm.config.mode).stage(7, "rollout context")?;
                out.rollouts.push(imagine_rollout(g, ewm, m, ctx).stage(7, "imagination rollout")?);
            }
        }
        if comp.imagination && phase == Phase::Train {
            let pairs: Vec<(&Rollout, Var)> = out
                .rollouts
                .iter()
                .filter_map(|r| splits[r.modality.index()].as_ref().and_then(|s| s.fut).map(|f| (r, f)))
                .collect();
            if !pairs.is_empty() {
                out.imagination =
                    Some(imagination_loss(g, &pairs, ewm.config.future_queries).stage(8, "imagination loss")?);
            }
        }
        let regime = Regime::for_modalities(available.len())?;
        let raw = match comp.beliefs {
            BeliefSource::None => return Ok(out),
            BeliefSource::Imagined => {
                let mama = self.mama.as_ref().expect("imagined beliefs build aggregation params");
                let refs: Vec<&Rollout> = out.rollouts.iter().collect();
                let bank = assemble_memory(g, mama, &refs).stage(9, "memory bank")?;
                let state = aggregate_beliefs(g, mama, &bank, regime).stage(9, "belief aggregation")?;
                let mut b = state.beliefs;
                if comp.boundary_residual {
                    let bounds: Vec<Var> = available.iter().map(|m| splits[m.index()].unwrap().boundary).collect();
                    b = boundary_residual(g, mama, b, &bounds).stage(10, "boundary residual")?;
                }
                out.aggregation = Some((state, bank));
                b
            }
            BeliefSource::Pooling => {
                let per = regime.belief_count(ewm.config.base_beliefs) / available.len();
                let pooled = available
                    .iter()
                    .map(|m| g.adaptive_avg_pool(splits[m.index()].unwrap().past, per))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_rows(&pooled)?
            }
            BeliefSource::Random => {
                let tables = self.random_beliefs.as_ref().expect("random variant builds its rows");
                g.constant(tables[usize::from(regime == Regime::Dual)].clone())?
            }
        };
        let inject = self.inject.as_ref().expect("belief variants build injection params");
        out.injected = Some(up_project_beliefs(g, inject, raw).stage(11, "up-projection")?);
        Ok(out)
    }

    /// Truncate, inject and run the backbone to logits for a batch of
    /// `(sequence, keep, beliefs)`. Returned rows are logits, aligned with
    /// the (padded) augmented layout.
    pub fn lm_logits(
        &self,
        g: &Graph,
        items: &[(TokenSequence, f64, Option<Var>)],
    ) -> Result<Vec<AugmentedSequence>> {
        let positions = self.config.components.positions;
        let layer = self.config.components.inject_layer;
        let mut augmented = Vec::with_capacity(items.len());
        for (seq, keep, beliefs) in items {
            let emb = self.thinker.embed(g, &seq.tokens)?;
            let labels = answer_labels(seq);
            let (rows, plan) = crate::inject::apply_keep_mask(g, emb, &seq.roles, *keep).stage(12, "keep mask")?;
            let roles: Vec<Role> = plan.kept.iter().map(|&i| seq.roles[i]).collect();
            let labels: Vec<i64> = plan.kept.iter().map(|&i| labels[i]).collect();
            let aug = match layer {
                InjectLayer::Embedding => interleave_inject(g, rows, &roles, &labels, *beliefs, positions),
                InjectLayer::FinalHidden => {
                    let h = self.thinker.forward_embeddings(g, rows, None)?;
                    interleave_inject(g, h, &roles, &labels, *beliefs, positions)
                }
            }
            .stage(12, "belief injection")?;
            augmented.push(aug);
        }
        let padded = pad_batch(g, augmented).stage(12, "padding")?;
        padded
            .into_iter()
            .map(|mut aug| {
                let hidden = match layer {
                    InjectLayer::Embedding => self.thinker.forward_embeddings(g, aug.rows, Some(&aug.mask))?,
                    InjectLayer::FinalHidden => aug.rows,
                };
                aug.rows = self.thinker.logits(g, hidden)?;
                Ok(aug)
            })
            .collect()
    }
}
