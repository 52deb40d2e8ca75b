//! Training with MSE and Adam, evaluation metrics and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use metrics::MetricsReport;
pub use optim::{adam_step, mse_loss, AdamConfig};

use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::models::{stack, Mode, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub target_standardization: bool,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            target_standardization: true,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "learning_rate must be positive and betas in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Affine target transform `z = (y - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub const IDENTITY: TargetScaler = TargetScaler {
        mean: 0.0,
        std: 1.0,
    };

    /// Population mean and standard deviation; a constant target set keeps
    /// unit scale.
    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::IDENTITY;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        TargetScaler { mean, std }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Preprocessed `[H, W, 3]` images with temperature labels in °C.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, targets: Vec<f64>) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(Error::dim("dataset", &[images.len()], &[targets.len()]));
        }
        Ok(Dataset { images, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch (dropout active), in °C².
    pub train_mse: f64,
    /// Eval-mode validation MSE in °C²; NaN without a validation set.
    pub val_mse: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Lowest validation MSE seen (the last epoch when there is no validation set).
    pub best: Checkpoint,
    /// State after the final epoch, for resuming.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Where a resumed run picks up.
pub struct Resume {
    /// Completed epochs; training continues at `epoch + 1`.
    pub epoch: usize,
    /// Best checkpoint of the earlier run, if known.
    pub best: Option<Checkpoint>,
}

/// De-standardized eval-mode predictions in °C.
pub fn predict(model: &Model, scaler: &TargetScaler, images: &[Tensor]) -> Result<Vec<f64>> {
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok(model
        .predict(&refs)?
        .into_iter()
        .map(|z| scaler.inverse(z))
        .collect())
}

pub fn evaluate(model: &Model, scaler: &TargetScaler, data: &Dataset) -> Result<MetricsReport> {
    let pred = predict(model, scaler, &data.images)?;
    MetricsReport::from_predictions(&pred, &data.targets)
}

pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_resume(model, train_set, val_set, config, None)
}

/// Runs epochs `resume.epoch + 1 ..= config.epochs`. Shuffling and dropout
/// draw from per-epoch streams of `config.seed`, so a resumed run matches an
/// uninterrupted one bit for bit.
pub fn train_resume(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    resume: Option<Resume>,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val_set, config, resume, &mut |_| {})
}

/// [`train_resume`] calling `on_epoch` after every finished epoch.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    resume: Option<Resume>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    if !train_set
        .targets
        .iter()
        .chain(&val_set.targets)
        .all(|t| t.is_finite())
    {
        return Err(Error::NonFinite("training targets".into()));
    }
    let scaler = if config.target_standardization {
        TargetScaler::fit(&train_set.targets)
    } else {
        TargetScaler::IDENTITY
    };
    let (start, mut best) = match resume {
        Some(r) => (r.epoch, r.best),
        None => (0, None),
    };
    if start >= config.epochs {
        return Err(Error::Config(format!(
            "resume point epoch {start} leaves nothing to do for {} epochs",
            config.epochs
        )));
    }
    let hyper = config.adam();
    let z: Vec<f64> = train_set
        .targets
        .iter()
        .map(|&y| scaler.forward(y))
        .collect();
    let mut history = Vec::with_capacity(config.epochs - start);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in start + 1..=config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(2 * epoch as u64);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(2 * epoch as u64 + 1);
        order.sort_unstable();
        if config.shuffle_each_epoch {
            order.shuffle(&mut shuffle_rng);
        }
        let mut sse = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                batch: b + 1,
                loss,
            };
            let imgs: Vec<&Tensor> = idx.iter().map(|&i| &train_set.images[i]).collect();
            let tgt = Tensor::new([idx.len()], idx.iter().map(|&i| z[i]).collect())?;
            let mut g = Graph::new();
            let x = g.constant(stack(&imgs)?);
            // the graph's own finiteness checks (debug builds) count as divergence too
            let step = (|| {
                let out = model.forward(&mut g, x, Mode::Train(&mut dropout_rng))?;
                let t = g.constant(tgt);
                mse_loss(&mut g, out.prediction, t)
            })();
            let loss = match step {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            let l = g.value(loss).item()?;
            if !l.is_finite() {
                return Err(diverged(l));
            }
            sse += l * idx.len() as f64;
            model.store.zero_grad();
            match g.backward(loss, &mut model.store) {
                Err(Error::NonFinite(_)) => return Err(diverged(l)),
                r => r?,
            };
            adam_step(&mut model.store, &hyper)?;
        }
        let train_mse = sse / train_set.len() as f64 * scaler.std * scaler.std;
        let val_mse = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(model, &scaler, val_set)?.mse
        };
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
        };
        on_epoch(&record);
        history.push(record);
        let improved = match &best {
            None => true,
            Some(b) => val_mse.is_nan() || val_mse < b.val_mse,
        };
        if improved {
            best = Some(Checkpoint::capture(model, epoch as u64, scaler, val_mse));
        }
    }
    let last = Checkpoint::capture(
        model,
        config.epochs as u64,
        scaler,
        history.last().map_or(f64::NAN, |h| h.val_mse),
    );
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last,
        history,
    })
}

/// CSV with header `epoch,train_mse,val_mse`; a missing validation value is
/// left empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for h in history {
        let val = if h.val_mse.is_nan() {
            String::new()
        } else {
            h.val_mse.to_string()
        };
        writeln!(out, "{},{},{}", h.epoch, h.train_mse, val).unwrap();
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Parses [`history_csv`] output (used when resuming).
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_owned();
        let num = |s: String| -> Result<f64> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse()
                    .map_err(|_| Error::format(path, format!("bad number `{s}`")))
            }
        };
        out.push(EpochRecord {
            epoch: field(0)
                .parse()
                .map_err(|_| Error::format(path, format!("bad epoch `{}`", field(0))))?,
            train_mse: num(field(1))?,
            val_mse: num(field(2))?,
        });
    }
    Ok(out)
}
