//! Central finite-difference verification of the adjoint rules.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step probes crossed a ReLU kink or changed a
    /// pooling argmax; the derivative is not defined there.
    pub skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `loss` against central differences on
/// `opts.samples` parameter coordinates, drawn round-robin over the parameter
/// tensors so every tensor is exercised. Graph and parameters must be `f64`.
pub fn grad_check(
    graph: &mut Graph<f64>,
    params: &ParamSet<f64>,
    inputs: &BTreeMap<String, Tensor<f64>>,
    loss: NodeId,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    graph.forward(params, inputs)?;
    let base_fp = graph.switch_fingerprint();
    let grads = graph.backward(params, loss)?;
    let ids: Vec<_> = params.ids().filter(|&id| !params.get(id).is_empty()).collect();
    if ids.is_empty() {
        return Err(Error::ShapeMismatch("grad_check on an empty parameter set".into()));
    }

    let mut rng = Rng::new(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let max_attempts = opts.samples * 20;
    let mut attempt = 0;
    while report.checked < opts.samples && attempt < max_attempts {
        let id = ids[attempt % ids.len()];
        attempt += 1;
        let coord = rng.below_incl(params.get(id).len() - 1);
        let orig = params.get(id).data()[coord];

        probe.get_mut(id).data_mut()[coord] = orig + opts.step;
        graph.forward(&probe, inputs)?;
        let up = graph.value(loss).item();
        let fp_up = graph.switch_fingerprint();
        probe.get_mut(id).data_mut()[coord] = orig - opts.step;
        graph.forward(&probe, inputs)?;
        let down = graph.value(loss).item();
        let fp_down = graph.switch_fingerprint();
        probe.get_mut(id).data_mut()[coord] = orig;

        if fp_up != base_fp || fp_down != base_fp {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grads.get(id).data()[coord];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_string(), coord));
        }
        report.checked += 1;
    }
    // leave the graph holding the unperturbed activations
    graph.forward(params, inputs)?;
    Ok(report)
}
