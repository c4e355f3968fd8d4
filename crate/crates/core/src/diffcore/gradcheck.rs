//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Result, UbrError};

/// Denominator floor for the relative error, so that gradients which are zero
/// up to round-off are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central differences of a scalar `f` carry rounding error of order
/// `ε·|f| / step`; differences within this many such units count as agreement.
const ROUNDOFF_ULPS: f64 = 4.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose ±step evaluations crossed a ReLU, pooling or smooth-L1
    /// kink; central differences are meaningless there.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance && self.tensors.iter().all(|t| t.checked > 0)
    }
}

/// Compares gradients of a graph-built scalar against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradChecker {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradChecker {
    fn default() -> Self {
        GradChecker {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

struct Evaluation {
    value: f64,
    signature: Vec<u64>,
}

fn evaluate<F>(params: &[(String, Tensor)], build: &F) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| graph.parameter(t.clone())).collect();
    let out = build(&mut graph, &ids)?;
    if !graph.value(out).is_scalar() {
        return Err(UbrError::NonScalarOutput(graph.value(out).shape().to_vec()));
    }
    Ok((graph, ids, out))
}

impl GradChecker {
    pub fn new(step: f64, tolerance: f64) -> Self {
        GradChecker { step, tolerance }
    }

    /// Runs `build` once with backward to get analytic gradients, then
    /// perturbs every parameter element.
    pub fn check<F>(&self, params: &[(String, Tensor)], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let (mut graph, ids, out) = evaluate(params, &build)?;
        graph.backward(out)?;
        let analytic: Vec<Tensor> = ids
            .iter()
            .zip(params)
            .map(|(&id, (_, t))| graph.grad(id).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect();
        self.compare(params, &analytic, build)
    }

    /// Checks externally supplied gradients against central differences of
    /// the graph output.
    pub fn compare<F>(&self, params: &[(String, Tensor)], analytic: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        if analytic.len() != params.len() {
            return Err(UbrError::InvalidArgument(format!(
                "{} gradients supplied for {} parameters",
                analytic.len(),
                params.len()
            )));
        }
        let base_signature = evaluate(params, &build)?.0.kink_signature();
        let eval = |params: &[(String, Tensor)]| -> Result<Evaluation> {
            let (graph, _, out) = evaluate(params, &build)?;
            Ok(Evaluation {
                value: graph.value(out).data()[0],
                signature: graph.kink_signature(),
            })
        };

        let mut work: Vec<(String, Tensor)> = params.to_vec();
        let mut tensors = Vec::with_capacity(params.len());
        for (p, grad) in analytic.iter().enumerate() {
            if grad.shape() != params[p].1.shape() {
                return Err(UbrError::InvalidShape {
                    shape: grad.shape().to_vec(),
                    reason: format!("gradient for `{}` must match its parameter", params[p].0),
                });
            }
            let mut check = TensorCheck {
                name: params[p].0.clone(),
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
            };
            for i in 0..grad.len() {
                let original = params[p].1.data()[i];
                work[p].1.data_mut()[i] = original + self.step;
                let plus = eval(&work)?;
                work[p].1.data_mut()[i] = original - self.step;
                let minus = eval(&work)?;
                work[p].1.data_mut()[i] = original;
                if plus.signature != base_signature || minus.signature != base_signature {
                    check.skipped += 1;
                    continue;
                }
                let numeric = (plus.value - minus.value) / (2.0 * self.step);
                // Rounding in the two evaluations bounds how well `numeric` can agree.
                let roundoff = ROUNDOFF_ULPS * f64::EPSILON * plus.value.abs().max(minus.value.abs()) / self.step;
                let excess = ((grad.data()[i] - numeric).abs() - roundoff).max(0.0);
                let scale = grad.data()[i].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
                check.max_rel_error = check.max_rel_error.max(excess / scale);
                check.checked += 1;
            }
            tensors.push(check);
        }
        Ok(GradCheckReport {
            tensors,
            tolerance: self.tolerance,
        })
    }
}

/// Central differences of a plain function of a flat vector.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}
