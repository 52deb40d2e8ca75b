//! Specklegram datasets: on-disk format, preprocessing, splitting and a
//! synthetic generator.

pub mod filters;
mod manifest;
pub mod pnm;
mod preprocess;
mod split;
mod synthetic;

use std::path::Path;

pub use filters::{lbp, resize_bilinear, sobel_gradient, sobel_magnitude};
pub use manifest::{temperature_of_index, DatasetManifest, ManifestRecord, GRID_SAMPLE_COUNT};
pub use preprocess::{preprocess, preprocess_image, PreprocessConfig};
pub use split::{split, split_indices, Split, SplitRatios};
pub use synthetic::{generate_synthetic, zncc, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use pnm::GrayImage;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecklegramSample {
    /// `[H, W, C]` with every value in `[0, 1]`.
    pub image: Tensor,
    /// Temperature label in °C.
    pub temperature: f64,
    pub source_id: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub replicate_channels: bool,
    /// Reject images whose `[height, width]` differ.
    pub expected_size: Option<[usize; 2]>,
}

/// Loads every manifest record (paths relative to the manifest's directory).
pub fn load_dataset(
    manifest_path: impl AsRef<Path>,
    options: &LoadOptions,
) -> Result<Vec<SpecklegramSample>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .map(|rec| {
            let path = dir.join(&rec.filename);
            let img = pnm::read_pgm(&path)?;
            if let Some([h, w]) = options.expected_size {
                if (img.height, img.width) != (h, w) {
                    return Err(Error::format(
                        &path,
                        format!(
                            "size {}x{} does not match expected {h}x{w}",
                            img.height, img.width
                        ),
                    ));
                }
            }
            Ok(SpecklegramSample {
                image: gray_to_tensor(&img, options.replicate_channels),
                temperature: rec.temperature,
                source_id: rec.filename.clone(),
            })
        })
        .collect()
}

pub fn gray_to_tensor(img: &GrayImage, replicate_channels: bool) -> Tensor {
    let unit = img.to_unit();
    if replicate_channels {
        let data = unit.iter().flat_map(|&v| [v, v, v]).collect();
        Tensor::from_parts(vec![img.height, img.width, 3], data)
    } else {
        Tensor::from_parts(vec![img.height, img.width, 1], unit)
    }
}

/// Writes samples as `<source_id>.pgm` plus `manifest.csv` into `dir`.
/// Multi-channel images are stored as their channel mean.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[SpecklegramSample],
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest::default();
    for s in samples {
        let gray = filters::to_gray(&s.image)?;
        let img = GrayImage::from_unit(gray.shape()[1], gray.shape()[0], gray.data())?;
        let filename = format!("{}.pgm", s.source_id);
        pnm::write_pgm(dir.join(&filename), &img)?;
        manifest.records.push(ManifestRecord {
            filename,
            temperature: s.temperature,
        });
    }
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}
