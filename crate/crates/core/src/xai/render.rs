use std::path::Path;

use crate::data::pnm::{self, GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Black → red → yellow ramp: `r = min(255, 2i)`, `g = max(0, 2i - 255)`, `b = 0`.
pub fn heat_ramp(i: u8) -> [u8; 3] {
    let i = i as u32;
    [(2 * i).min(255) as u8, (2 * i).saturating_sub(255) as u8, 0]
}

fn check_unit_map(map: &Tensor) -> Result<(usize, usize)> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::dim("render", map.shape(), &[]));
    };
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range {
            what: "map value",
            value: v.to_string(),
        });
    }
    Ok((h, w))
}

/// 8-bit grayscale image of a `[H, W]` map with values in `[0, 1]`.
pub fn grayscale_image(map: &Tensor) -> Result<GrayImage> {
    let (h, w) = check_unit_map(map)?;
    GrayImage::from_unit(w, h, map.data())
}

/// Blends the grayscale `base` (`[H, W]`, `[0, 1]`) with [`heat_ramp`] colors
/// at weight `s` per pixel: `out = (1 - s)·base + s·ramp(round(255 s))`,
/// computed on bytes and rounded.
pub fn overlay_image(base: &Tensor, map: &Tensor) -> Result<RgbImage> {
    let (h, w) = check_unit_map(map)?;
    if base.shape() != map.shape() {
        return Err(Error::dim("render_overlay", base.shape(), map.shape()));
    }
    let mut pixels = Vec::with_capacity(3 * h * w);
    for (&b, &s) in base.data().iter().zip(map.data()) {
        let gray = pnm::quantize(b) as f64;
        let color = heat_ramp(pnm::quantize(s));
        for c in color {
            pixels.push(((1.0 - s) * gray + s * c as f64).round() as u8);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn render_grayscale(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    pnm::write_pgm(path, &grayscale_image(map)?)
}

pub fn render_overlay(base: &Tensor, map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    pnm::write_ppm(path, &overlay_image(base, map)?)
}
