//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speckformer::data::{PreprocessConfig, SplitRatios, SyntheticConfig};
use speckformer::models::ModelConfig;
use speckformer::train::TrainConfig;
use speckformer::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DataConfig {
    /// `filename,temperature_C` manifest; the synthetic generator is used
    /// when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Seed of the synthetic generator (noise and dataset identity).
    pub synthetic_seed: u64,
    pub split: SplitRatios,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    /// A missing `target_size` resizes to the model's input size.
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text).map_err(|m| Error::Format {
            path: path.to_owned(),
            message: m,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Preprocessing with the target size filled in from the model.
    pub fn effective_preprocess(&self) -> PreprocessConfig {
        let mut p = self.preprocess.clone();
        if p.target_size.is_none() {
            p.target_size = Some([self.model.image_size; 2]);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.effective_preprocess().validate()?;
        if self.data.manifest.is_none() {
            self.data.synthetic.validate()?;
        }
        if !self.effective_preprocess().replicate_channels {
            return Err(Error::Config(
                "models take 3-channel input; preprocess.replicate_channels must be true".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c =
            RunConfig::parse(r#"{"model": {"variant": "swin"}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(
            c.model,
            ModelConfig::for_variant(speckformer::models::ModelVariant::Swin)
        );
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.effective_preprocess().target_size, Some([128, 128]));
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"data": {"manifesto": "x"}}"#,
            r#"{"train": {"epoch": 1}}"#,
            r#"{"model": {"depth": 1}}"#,
            r#"{"preprocess": {"sobel": true}}"#,
        ] {
            assert!(RunConfig::parse(doc).is_err(), "{doc}");
        }
    }
}
