//! Central finite-difference oracle for parameter gradients.
//!
//! Only the forward pass of the graph is used to build the numeric estimate,
//! so the check is independent of every backward rule it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Components whose analytic and numeric values are both below this are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients with central differences of step `h`.
///
/// At most `max_per_tensor` evenly spaced entries of each parameter tensor
/// are perturbed; `loss_fn` must be a deterministic function of the store.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss_fn: F,
    h: f64,
    max_per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, &analytic_store)?;
    g.backward(loss, &mut analytic_store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, s)?;
        g.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let base = store.get(&name)?.clone();
        let n = base.len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        let analytic = analytic_store
            .grad(&name)
            .expect("grad exists for every param")
            .clone();
        for idx in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus.data_mut()[idx] += h;
            probe.set(&name, plus)?;
            let f_plus = eval(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[idx] -= h;
            probe.set(&name, minus)?;
            let f_minus = eval(&probe)?;
            probe.set(&name, base.clone())?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let err = relative_error(analytic.data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{name}[{idx}]: analytic {} numeric {numeric}",
                    analytic.data()[idx]
                );
            }
        }
    }
    Ok(report)
}
