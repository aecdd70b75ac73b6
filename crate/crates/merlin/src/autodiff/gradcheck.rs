//! Finite-difference gradient verification in 64-bit shadow mode.

use std::collections::HashMap;

use super::graph::{AutodiffError, Graph};
use super::tensor::{Real, Tensor};

pub const PARAM_LIMIT: usize = 10_000;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compare analytic parameter gradients against central finite differences.
/// The graph is re-evaluated entirely in `f64`, so the check is limited by
/// the `step` truncation error rather than by training precision.
pub fn check_gradients<T: Real>(
    graph: &Graph<T>,
    inputs: &HashMap<String, Tensor<T>>,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport, AutodiffError> {
    check_impl(graph, inputs, tolerance, step, None)
}

/// Test hook: multiplies one analytic gradient tensor by `fault` before the
/// comparison, to prove the check catches a broken backward rule.
#[cfg(test)]
pub(crate) fn check_gradients_with_fault<T: Real>(
    graph: &Graph<T>,
    inputs: &HashMap<String, Tensor<T>>,
    tolerance: f64,
    step: f64,
    fault: f64,
) -> Result<GradCheckReport, AutodiffError> {
    check_impl(graph, inputs, tolerance, step, Some(fault))
}

fn check_impl<T: Real>(
    graph: &Graph<T>,
    inputs: &HashMap<String, Tensor<T>>,
    tolerance: f64,
    step: f64,
    fault: Option<f64>,
) -> Result<GradCheckReport, AutodiffError> {
    let count = graph.param_count();
    if count > PARAM_LIMIT {
        return Err(AutodiffError::TooManyParams {
            count,
            limit: PARAM_LIMIT,
        });
    }

    let mut shadow: Graph<f64> = graph.convert();
    let inputs64: HashMap<String, Tensor<f64>> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.convert()))
        .collect();

    shadow.zero_grads();
    shadow.forward(&inputs64)?;
    shadow.backward()?;
    let mut analytic: Vec<(String, Vec<f64>)> = shadow
        .params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]),
            )
        })
        .collect();
    if let (Some(f), Some(first)) = (fault, analytic.first_mut()) {
        for v in first.1.iter_mut() {
            *v *= f;
        }
    }

    let mut entries = Vec::with_capacity(analytic.len());
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for j in 0..grad.len() {
            let orig = shadow.params()[pi].value.data[j];
            shadow.params_mut()[pi].value.data[j] = orig + step;
            let up = shadow.forward(&inputs64)?.data[0];
            shadow.params_mut()[pi].value.data[j] = orig - step;
            let down = shadow.forward(&inputs64)?.data[0];
            shadow.params_mut()[pi].value.data[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = grad[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
        });
    }
    let pass = entries.iter().all(|e| e.max_rel_err < tolerance);
    Ok(GradCheckReport {
        entries,
        tolerance,
        pass,
    })
}
