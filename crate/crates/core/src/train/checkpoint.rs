//! Binary checkpoint container.
//!
//! ```text
//! "SPKF" | u32 version | u32 len | JSON header (len bytes)
//! u64 epoch | f64 target_mean | f64 target_std | f64 val_mse | u64 adam_step
//! u32 count | count × { u32 name_len | name | u32 rank | rank × u64 dim
//!                       | value f64s | first moment f64s | second moment f64s }
//! ```
//! All integers and floats are little-endian, so every value round-trips
//! bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::ParameterStore;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;

use super::TargetScaler;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Values and Adam moments; gradients are not stored.
    pub params: ParameterStore,
    /// Number of completed epochs.
    pub epoch: u64,
    pub scaler: TargetScaler,
    /// Validation MSE (°C²) at this epoch; NaN when there was no validation set.
    pub val_mse: f64,
    /// Free-form run description carried alongside the model.
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: u64, scaler: TargetScaler, val_mse: f64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.store.clone(),
            epoch,
            scaler,
            val_mse,
            metadata: serde_json::Value::Null,
        }
    }

    /// Rebuilds the model this checkpoint describes.
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }

    /// Installs the stored parameters into `model`, which must have been
    /// built from the same configuration.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if model.config != self.config {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model with a different configuration than the target {} model",
                self.config.variant, model.config.variant
            )));
        }
        *model = self.model()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.config.clone(),
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 24 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for v in [self.scaler.mean, self.scaler.std, self.val_mse] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.params.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for t in [&p.value, &p.first_moment, &p.second_moment] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("missing SPKF magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let epoch = r.u64("epoch")?;
        let scaler = TargetScaler {
            mean: r.f64("target mean")?,
            std: r.f64("target std")?,
        };
        let val_mse = r.f64("validation mse")?;
        let step = r.u64("optimizer step")?;
        let count = r.u32("parameter count")?;
        let mut params = ParameterStore::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Corrupt(format!("parameter {i} name is not UTF-8")))?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::Corrupt(format!("truncated data for parameter {name}")))?;
            let mut tensor = || -> Result<Tensor> {
                let data = (0..n).map(|_| r.f64(&name)).collect::<Result<Vec<_>>>()?;
                Tensor::new(shape.clone(), data).map_err(|e| Error::Corrupt(e.to_string()))
            };
            let value = tensor()?;
            let m = tensor()?;
            let v = tensor()?;
            let id = params
                .add(name, value)
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            let p = params.get_mut(id);
            p.first_moment = m;
            p.second_moment = v;
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        params.step = step;
        Ok(Checkpoint {
            config: header.model,
            params,
            epoch,
            scaler,
            val_mse,
            metadata: header.metadata,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("file truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
