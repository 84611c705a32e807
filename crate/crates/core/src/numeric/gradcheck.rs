//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |numeric|)` over all entries.
    pub max_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tol
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` for every
/// entry of `params` against central differences with step `step`.
///
/// `f` receives a fresh graph and one leaf per parameter, and must be
/// deterministic.
pub fn grad_check_with_step<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    if let Some(node) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            node: node.index(),
            op: "gradient",
        });
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
        tol,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                report.worst = Some((pi, e));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

pub fn grad_check<F>(f: F, params: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with_step(f, params, DEFAULT_FD_STEP, tol)
}
