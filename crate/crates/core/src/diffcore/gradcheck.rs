use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Below this magnitude the relative error is measured against the floor
/// instead, so vanishing gradients do not turn round-off into failures.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Compares backward adjoints to central differences for every trainable
/// entry of `store`. `build` must be a pure function of the store values.
pub fn gradcheck<F>(store: &mut ParamStore, h: f64, tol: f64, mut build: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    let grads = g.backward(root)?;
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store, &mut build)?;
            store.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store, &mut build)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > check.max_rel_err || k == 0 {
                check.max_rel_err = err;
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_err <= tol;
        params.push(check);
    }
    Ok(GradcheckReport { params, tol })
}

fn eval<F>(store: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    g.item(root)
}
