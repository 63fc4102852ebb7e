use crate::error::{Error, Result};

use super::{Graph, NodeId, Tensor};

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, `|a − n| / max(|a|, |n|, 1e-8)`, over every element of every
/// parameter. `f` records a scalar function of the parameter nodes.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 1e-7 && h < 1e-3) {
        return Err(Error::Domain(format!("finite-difference step {h} outside (1e-7, 1e-3)")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone(), false)).collect();
        let out = f(&mut g, &ids)?;
        let v = g.data(out)[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.input(p.clone(), true)).collect();
    let out = f(&mut g, &ids)?;
    if !g.data(out)[0].is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let grads = g.backward(out)?;

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("parameter was tracked");
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
