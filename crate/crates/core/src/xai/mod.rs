//! Explanations: attention maps, input-gradient saliency and learned patch
//! importance, plus PGM/PPM rendering.

mod render;

use std::path::{Path, PathBuf};

pub use render::{grayscale_image, heat_ramp, overlay_image, render_grayscale, render_overlay};

use crate::data::filters::{min_max_normalize, to_gray};
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::models::{Mode, Model, ModelVariant};
use crate::tensor::Tensor;

/// Row-stochastic attention of every block and head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    /// `[blocks, heads, N, N]` in token order (windowed blocks are expanded
    /// with zeros outside each window).
    pub values: Tensor,
    pub variant: ModelVariant,
}

impl AttentionStack {
    pub fn num_blocks(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_heads(&self) -> usize {
        self.values.shape()[1]
    }

    /// The `[N, N]` map of one block and head.
    pub fn map(&self, block: usize, head: usize) -> Tensor {
        let s = self.values.shape();
        let nn = s[2] * s[3];
        let start = (block * s[1] + head) * nn;
        Tensor::new([s[2], s[3]], self.values.data()[start..start + nn].to_vec())
            .expect("slice matches")
    }
}

fn single(model: &Model, image: &Tensor) -> Result<Tensor> {
    let n = model.config.image_size;
    if image.shape() != [n, n, 3] {
        return Err(Error::dim("explain", image.shape(), &[n, n, 3]));
    }
    image.reshape([1, n, n, 3])
}

/// Post-softmax attention from one eval-mode forward pass.
pub fn extract_attention_maps(model: &Model, image: &Tensor) -> Result<AttentionStack> {
    if model.variant() == ModelVariant::Cnn {
        return Err(Error::UnsupportedVariant(model.variant().to_string()));
    }
    let mut g = Graph::new();
    let x = g.constant(single(model, image)?);
    let out = model.forward(&mut g, x, Mode::Eval)?;
    let layouts = model.window_layouts();
    let mut data = Vec::new();
    let mut dims = [out.attention.len(), 0, 0, 0];
    for cap in &out.attention {
        let a = g.value(cap.attn);
        let full = match layouts.get(cap.block) {
            Some(wl) => wl.scatter(a),
            None => a.clone(),
        };
        let s = full.shape();
        dims[1..].copy_from_slice(&s[1..]);
        data.extend_from_slice(full.data());
    }
    Ok(AttentionStack {
        values: Tensor::new(dims.to_vec(), data)?,
        variant: model.variant(),
    })
}

/// Signed gradient of the model output with respect to each input value,
/// `[H, W, 3]`. Model parameters are left untouched.
pub fn input_gradient(model: &Model, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(single(model, image)?);
    let out = model.forward(&mut g, x, Mode::Eval)?;
    let y = g.sum(out.prediction)?;
    let mut scratch = model.store.clone();
    let grads = g.backward(y, &mut scratch)?;
    grads
        .get(x)
        .expect("input requires grad")
        .reshape(image.shape().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `[H, W]`, max-normalized to 1 unless all zero.
    pub values: Tensor,
    /// `Σ_c |∂y/∂x_c|` before normalization.
    pub raw: Tensor,
}

/// Channel-summed gradient magnitude, max-normalized. Gradients are taken
/// of the raw model output; target de-standardization is a positive scale
/// that normalization removes.
pub fn saliency_map(model: &Model, image: &Tensor) -> Result<SaliencyMap> {
    Ok(saliency_from_gradient(&input_gradient(model, image)?))
}

pub fn saliency_from_gradient(grad: &Tensor) -> SaliencyMap {
    let (h, w, c) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let raw: Vec<f64> = grad
        .data()
        .chunks(c)
        .map(|px| px.iter().map(|v| v.abs()).sum())
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 {
        raw.iter().map(|v| v / max).collect()
    } else {
        raw.clone()
    };
    SaliencyMap {
        values: Tensor::new([h, w], values).expect("shape"),
        raw: Tensor::new([h, w], raw).expect("shape"),
    }
}

/// Learned importance weights of a LINA-ViT model on its patch grid.
pub fn importance_heatmap(model: &Model) -> Result<Tensor> {
    let w = model.importance().ok_or_else(|| {
        Error::UnsupportedVariant(format!("{} has no importance weights", model.variant()))
    })?;
    let (gh, gw) = model.config.grid();
    model.store.value(w.id).reshape([gh, gw])
}

/// Max-normalizes a nonnegative map to `[0, 1]` (an all-zero map stays zero).
pub fn max_normalize(map: &Tensor) -> Tensor {
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map.map(|v| v.max(0.0) / max)
    } else {
        map.map(|_| 0.0)
    }
}

/// Writes every explanation the model supports into `dir`:
/// `attn_b{block}_h{head}.pgm` (transformers), `saliency.pgm`,
/// `overlay.ppm`, and `importance.pgm` (LINA-ViT). Returns the written paths.
pub fn write_explanations(
    model: &Model,
    image: &Tensor,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    match extract_attention_maps(model, image) {
        Ok(stack) => {
            for b in 0..stack.num_blocks() {
                for h in 0..stack.num_heads() {
                    let p = dir.join(format!("attn_b{b}_h{h}.pgm"));
                    render_grayscale(&max_normalize(&stack.map(b, h)), &p)?;
                    written.push(p);
                }
            }
        }
        Err(Error::UnsupportedVariant(_)) => {}
        Err(e) => return Err(e),
    }
    let sal = saliency_map(model, image)?;
    let p = dir.join("saliency.pgm");
    render_grayscale(&sal.values, &p)?;
    written.push(p);
    let p = dir.join("overlay.ppm");
    render_overlay(&to_gray(image)?, &sal.values, &p)?;
    written.push(p);
    if let Ok(w) = importance_heatmap(model) {
        let p = dir.join("importance.pgm");
        render_grayscale(&min_max_normalize(&w), &p)?;
        written.push(p);
    }
    Ok(written)
}
