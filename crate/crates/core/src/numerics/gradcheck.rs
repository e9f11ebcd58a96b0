use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Maximum relative error between reverse-mode gradients and central
/// differences over every coordinate of `ids`.
///
/// `f` builds a scalar loss on the graph it is given and must be
/// deterministic. Relative error uses `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let analytic: HashMap<ParamId, Vec<f64>> = {
        let g = Graph::with_params(store).track_all_params();
        let loss = f(&g)?;
        let grads = g.backward(loss)?.params();
        ids.iter()
            .map(|id| {
                let n = store.value(*id).len();
                let v = grads
                    .get(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; n]);
                (*id, v)
            })
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::with_params(store);
        let loss = f(&g)?;
        Ok(g.item(loss))
    };
    let mut worst = 0.0_f64;
    for id in ids {
        for j in 0..store.value(*id).len() {
            let orig = store.value(*id).data()[j];
            store.value_mut(*id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(*id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(*id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[id][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
