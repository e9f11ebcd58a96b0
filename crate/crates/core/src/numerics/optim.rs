use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warm-up.
    pub warmup_frac: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.03,
            total_steps: 1000,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for 1-based `step`: linear warm-up then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warmup = (self.warmup_frac * total).round();
        let s = step as f64;
        if warmup > 0.0 && s <= warmup {
            return self.lr * s / warmup;
        }
        let progress = ((s - warmup) / (total - warmup).max(1.0)).clamp(0.0, 1.0);
        0.5 * self.lr * (1.0 + (PI * progress).cos())
    }
}

/// AdamW moments for a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: usize,
    ids: Vec<ParamId>,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m = ids
            .iter()
            .map(|&id| (id, vec![0.0; store.value(id).len()]))
            .collect::<HashMap<_, _>>();
        let v = m.clone();
        Self {
            config,
            step: 0,
            ids,
            m,
            v,
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step.max(1))
    }

    /// One decoupled-weight-decay Adam update. Every managed parameter must
    /// have an entry in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) -> Result<()> {
        for id in &self.ids {
            if !grads.contains_key(id) {
                return Err(Error::MissingGradient(store.get(*id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in &self.ids {
            let g = grads[id].data();
            let p = store.get_mut(*id);
            let wd = if p.decay { c.weight_decay } else { 0.0 };
            let m = self.m.get_mut(id).expect("moment");
            let v = self.v.get_mut(id).expect("moment");
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * wd * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &HashMap<ParamId, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    state.step(store, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(value: f64, decay: bool) -> (ParamStore, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store
            .register("w", &[1], Init::Constant(value), decay, &mut rng)
            .unwrap();
        (store, id)
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let (mut store, id) = scalar_store(0.7, false);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &store, vec![id]);
        let grads = HashMap::from([(id, Tensor::scalar(0.0))]);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.value(id).item(), 0.7);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn one_step_matches_closed_form() {
        let (w0, g, lr, wd) = (0.5_f64, 0.3_f64, 1e-2_f64, 0.01_f64);
        let (mut store, id) = scalar_store(w0, true);
        let config = AdamWConfig {
            lr,
            weight_decay: wd,
            warmup_frac: 0.0,
            total_steps: 10,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(config, &store, vec![id]);
        opt.step(&mut store, &HashMap::from([(id, Tensor::scalar(g))]))
            .unwrap();
        // step 1: mhat = g, vhat = g^2, cosine factor at progress 0.1
        let lr1 = 0.5 * lr * (1.0 + (PI * 0.1).cos());
        let expected = w0 * (1.0 - lr1 * wd) - lr1 * g / (g.abs() + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let (mut store, id) = scalar_store(1.0, true);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &store, vec![id]);
        let err = opt.step(&mut store, &HashMap::new()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = AdamWConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            total_steps: 100,
            ..AdamWConfig::default()
        };
        assert!((c.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(55) < c.lr_at(20));
        assert!(c.lr_at(100).abs() < 1e-12);
    }
}
