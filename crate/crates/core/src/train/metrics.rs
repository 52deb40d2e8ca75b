use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression metrics in °C. `r2` is `None` when the targets are constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub max_error: f64,
    pub r2: Option<f64>,
    pub n: usize,
}

impl MetricsReport {
    pub fn from_predictions(pred: &[f64], target: &[f64]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::dim("metrics", &[pred.len()], &[target.len()]));
        }
        let n = pred.len();
        if n == 0 {
            return Err(Error::InsufficientData { need: 1, got: 0 });
        }
        if !pred.iter().chain(target).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("metric inputs".into()));
        }
        let nf = n as f64;
        let (mut sse, mut sae, mut max_error) = (0.0, 0.0, 0.0f64);
        for (p, t) in pred.iter().zip(target) {
            let e = (p - t).abs();
            sse += e * e;
            sae += e;
            max_error = max_error.max(e);
        }
        let mean = target.iter().sum::<f64>() / nf;
        let sst: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
        let mse = sse / nf;
        Ok(MetricsReport {
            mse,
            mae: sae / nf,
            rmse: mse.sqrt(),
            max_error,
            r2: (sst > 0.0).then(|| 1.0 - sse / sst),
            n,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
