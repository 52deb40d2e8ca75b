use super::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every parameter entry.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares backpropagated gradients of a scalar function against central
/// differences with step `h`, for every entry of every parameter in `store`.
///
/// `f` must be deterministic at fixed parameters. Parameter gradients in
/// `store` are overwritten with the analytic gradient.
pub fn grad_check<F>(f: F, store: &mut ParameterStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.value(out).item()
    };

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = store.grad(id).clone();
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of {name}[{k}]"
                )));
            }
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}
