use serde::{Deserialize, Serialize};

use super::filters::{lbp, min_max_normalize, resize_bilinear, sobel_gradient, to_gray};
use super::SpecklegramSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Preprocessing applied in the fixed order
/// resize → (Sobel | LBP) → normalize → channel replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// `[height, width]`; `None` keeps the source size.
    pub target_size: Option<[usize; 2]>,
    pub apply_gradient: bool,
    pub apply_lbp: bool,
    pub normalize: bool,
    pub replicate_channels: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: None,
            apply_gradient: true,
            apply_lbp: false,
            normalize: true,
            replicate_channels: true,
        }
    }
}

impl PreprocessConfig {
    /// Leaves images untouched.
    pub fn identity() -> Self {
        PreprocessConfig {
            target_size: None,
            apply_gradient: false,
            apply_lbp: false,
            normalize: false,
            replicate_channels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.apply_gradient && self.apply_lbp {
            return Err(Error::Config(
                "apply_gradient and apply_lbp are mutually exclusive".into(),
            ));
        }
        if let Some([h, w]) = self.target_size {
            if h == 0 || w == 0 {
                return Err(Error::Config("target_size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Preprocesses one `[H, W, C]` image. The output is `[H', W', C']` with
/// `C' = 3` when replication is on and the working image has one channel.
pub fn preprocess_image(image: &Tensor, config: &PreprocessConfig) -> Result<Tensor> {
    config.validate()?;
    let mut img = match *image.shape() {
        [h, w] => image.reshape([h, w, 1])?,
        [_, _, _] => image.clone(),
        _ => return Err(Error::dim("preprocess", image.shape(), &[])),
    };
    if let Some([h, w]) = config.target_size {
        img = resize_bilinear(&img, h, w)?;
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if config.apply_gradient {
        img = sobel_gradient(&to_gray(&img)?)?.reshape([h, w, 1])?;
    } else if config.apply_lbp {
        let codes = lbp(&to_gray(&img)?)?;
        img = Tensor::new([h, w, 1], codes.iter().map(|&c| c as f64 / 255.0).collect())?;
    }
    if config.normalize {
        img = min_max_normalize(&img);
    }
    if config.replicate_channels && img.shape()[2] == 1 {
        let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
        img = Tensor::new([h, w, 3], data)?;
    }
    Ok(img)
}

pub fn preprocess(sample: &SpecklegramSample, config: &PreprocessConfig) -> Result<Tensor> {
    preprocess_image(&sample.image, config)
}
