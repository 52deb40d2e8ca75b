use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};

/// Mean squared error between `[B]` predictions and targets.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("mse_loss", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its stored gradient.
pub fn adam_step(store: &mut ParameterStore, hyper: &AdamConfig) -> Result<()> {
    if !store.gradients_pending() {
        return Err(Error::Contract(
            "adam_step called without gradients from a backward pass".into(),
        ));
    }
    store.step += 1;
    let t = store.step as i32;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
    } = *hyper;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for p in store.iter_mut() {
        let g = p.grad.data();
        let m = p.first_moment.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        let v = p.second_moment.data_mut();
        for (v, &g) in v.iter_mut().zip(p.grad.data()) {
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let (m, v) = (p.first_moment.data(), p.second_moment.data());
        for ((x, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            *x -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    store.set_gradients_pending(false);
    Ok(())
}
