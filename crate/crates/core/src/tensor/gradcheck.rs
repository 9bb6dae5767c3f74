use super::{DenseArray, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the parameter with the largest error.
    pub worst: String,
    pub per_param: Vec<(String, f64)>,
}

/// Compare analytic gradients of a scalar graph function against central
/// differences for every unfrozen parameter in `store`.
///
/// Error for one parameter is `max|a - n| / max(max|a|, max|n|, 1e-8)` taken
/// over its elements; the report holds the maximum over parameters.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        if g.value(out).len() != 1 {
            return Err(Error::Config("grad_check needs a scalar function".into()));
        }
        let grads = g.backward_scalar(out)?;
        let mut by_id = vec![None; store.len()];
        for (id, d) in grads.params() {
            by_id[id.index()] = Some(d);
        }
        by_id
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut worst = (0.0f64, String::new());
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let a = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| DenseArray::zeros(p.array.shape()));
        if !a.all_finite() {
            return Err(Error::GradCheck {
                param: p.name.clone(),
                detail: "non-finite analytic gradient".into(),
            });
        }
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..p.array.len() {
            let orig = p.array.data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            if !num.is_finite() {
                return Err(Error::GradCheck {
                    param: p.name.clone(),
                    detail: format!("non-finite numeric gradient at element {i}"),
                });
            }
            max_diff = max_diff.max((a.data()[i] - num).abs());
            max_num = max_num.max(num.abs());
        }
        let rel = max_diff / a.max_abs().max(max_num).max(1e-8);
        if rel >= worst.0 || worst.1.is_empty() {
            worst = (rel, p.name.clone());
        }
        per_param.push((p.name.clone(), rel));
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        per_param,
    })
}
