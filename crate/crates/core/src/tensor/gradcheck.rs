//! Central-difference verification of analytic gradients.
//!
//! Only defined for `f64` graphs; finite differences at `f32` are too noisy
//! to verify anything.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

/// Per-leaf outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub step: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Names of leaves whose error exceeded the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.leaves
            .iter()
            .filter(|l| !(l.max_rel_error <= self.tol))
            .map(|l| l.name.as_str())
            .collect()
    }
}

/// Compare analytic gradients of `root` against central finite differences.
///
/// The relative error for one element is `|a - n| / max(1, |a|, |n|)`;
/// a leaf passes when its worst element is within `tol`.
pub fn grad_check(
    graph: &mut Graph<f64>,
    root: NodeId,
    bindings: &BTreeMap<String, Tensor<f64>>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) || !step.is_normal() {
        return Err(Error::Numerical(format!(
            "grad_check: degenerate finite-difference step {step}"
        )));
    }
    graph.forward(root, bindings)?;
    let analytic = graph.backward(root)?;

    let mut work: BTreeMap<String, Tensor<f64>> = bindings.clone();
    let mut leaves = Vec::new();
    let names: Vec<String> = graph.leaf_names().map(str::to_string).collect();
    for name in names {
        let n_elems = bindings[&name].numel();
        let mut max_rel: f64 = 0.0;
        for e in 0..n_elems {
            let orig = bindings[&name].data()[e];
            work.get_mut(&name).unwrap().data_mut()[e] = orig + step;
            let up = graph.forward(root, &work)?.scalar_value();
            work.get_mut(&name).unwrap().data_mut()[e] = orig - step;
            let down = graph.forward(root, &work)?.scalar_value();
            work.get_mut(&name).unwrap().data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[&name].data()[e];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
        leaves.push(LeafCheck {
            name,
            max_rel_error: max_rel,
        });
    }
    // restore caches for the unperturbed point
    graph.forward(root, bindings)?;
    let pass = leaves.iter().all(|l| l.max_rel_error <= tol);
    Ok(GradCheckReport {
        leaves,
        step,
        tol,
        pass,
    })
}
