use super::graph::{Graph, ParamId, ParamStore, Var};
use crate::error::{contract, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    /// `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|)` over the tensor.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` must rebuild the same scalar function from the current store on
/// every call (any randomness it uses has to be re-seeded inside).
pub fn grad_check<F>(
    build: F,
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(tol > 0.0 && step > 0.0) {
        return Err(contract("grad_check needs tol > 0 and step > 0"));
    }
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    let grads = g.backward(root)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, store)?;
        Ok(g.scalar(root))
    };

    let mut entries = Vec::with_capacity(params.len());
    for &id in params {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| ndarray::Array2::zeros(store.get(id).dim()));
        let mut numeric = analytic.clone();
        for (idx, slot) in numeric.indexed_iter_mut() {
            let orig = store.get(id)[idx];
            store.get_mut(id)[idx] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id)[idx] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id)[idx] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let scale = analytic
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .iter()
            .zip(numeric.iter())
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let max_rel_err = if scale > 0.0 { diff / scale } else { 0.0 };
        entries.push(ParamCheck {
            id,
            name: store.name(id).to_string(),
            max_rel_err,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
