//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    /// Seed for coordinate subsampling.
    pub seed: u64,
    /// Coordinates with `|analytic| + |numeric|` below this are too small
    /// for a meaningful relative error; they are judged by absolute error
    /// instead. Zero applies the relative error everywhere.
    pub zero_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: None, seed: 0, zero_scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates below `zero_scale` and their largest absolute error.
    pub unresolved: usize,
    pub max_abs_unresolved: f64,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of the scalar built by `f` from the leaf `x` against
/// central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaf = graph.param(x.clone());
    let loss = f(&mut graph, leaf)?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let value = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    compare_gradient(value, x, &analytic, opts)
}

/// Compares a supplied analytic gradient with central differences of
/// `value` around `x`.
pub fn compare_gradient<V>(
    value: V,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: x.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let first = value(x)?;
    let second = value(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "grad_check: function is not deterministic ({first} vs {second})"
        )));
    }

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(limit) if limit < n => {
            let mut picked = RngState::new(opts.seed).choose_distinct(n, limit);
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        unresolved: 0,
        max_abs_unresolved: 0.0,
    };
    let mut first = true;
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        if a.abs() + numeric.abs() < opts.zero_scale {
            report.unresolved += 1;
            report.max_abs_unresolved = report.max_abs_unresolved.max((a - numeric).abs());
            continue;
        }
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || first {
            first = false;
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
