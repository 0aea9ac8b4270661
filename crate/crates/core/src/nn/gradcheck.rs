//! Central finite-difference gradient checking for 64-bit graphs.

use super::graph::Graph;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (parameter name, element, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic parameter gradients of `loss` against central differences
/// for the listed `(parameter, element)` entries.
pub fn check_params(
    store: &ParamStore<f64>,
    entries: &[(ParamId, usize)],
    step: f64,
    floor: f64,
    loss: impl for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> crate::nn::Var<'g, f64>,
) -> CheckReport {
    let g = Graph::new();
    let out = loss(&g, store);
    let grads = g.backward(out);
    let mut report = CheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = store.clone();
    for &(id, k) in entries {
        let analytic = grads.param(id).map(|t| t.data()[k]).unwrap_or(0.0);
        let orig = probe.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = orig + step;
        let plus = eval(&probe, &loss);
        probe.get_mut(id).data_mut()[k] = orig - step;
        let minus = eval(&probe, &loss);
        probe.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), k, analytic, numeric));
        }
    }
    report
}

fn eval(
    store: &ParamStore<f64>,
    loss: &impl for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> crate::nn::Var<'g, f64>,
) -> f64 {
    let g = Graph::new();
    loss(&g, store).item()
}

/// Same as [`check_params`] but for a free input tensor.
pub fn check_input(
    input: &Tensor<f64>,
    indices: &[usize],
    step: f64,
    floor: f64,
    loss: impl for<'g> Fn(&'g Graph<f64>, crate::nn::Var<'g, f64>) -> crate::nn::Var<'g, f64>,
) -> CheckReport {
    let g = Graph::new();
    let x = g.variable(input.clone());
    let out = loss(&g, x);
    let grads = g.backward(out);
    let analytic_all = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut report = CheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = input.clone();
    let value = |t: &Tensor<f64>| {
        let g = Graph::new();
        let x = g.constant(t.clone());
        loss(&g, x).item()
    };
    for &k in indices {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let plus = value(&probe);
        probe.data_mut()[k] = orig - step;
        let minus = value(&probe);
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = analytic_all.data()[k];
        let err = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(("input".to_string(), k, analytic, numeric));
        }
    }
    report
}
