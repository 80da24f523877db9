use super::{Graph, NodeId, ParamSet};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(1e-8, |a| + |n|)` over all coordinates.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Checks the gradient of a scalar loss against central differences.
///
/// `build` records the loss into a fresh graph from the given parameter
/// values and returns the loss node; it must register each parameter with
/// [`Graph::param`] under its set name and be deterministic (any noise must
/// come from an `Rng` re-seeded inside `build`).
pub fn grad_check<F>(params: &ParamSet<f64>, eps: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss)?;

    let mut eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.require(name)?.len();
        let grad = analytic.require(name)?.clone();
        for i in 0..n {
            let orig = params.require(name)?.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
