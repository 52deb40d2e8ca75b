//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved `r, g, b` bytes, row-major.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::dim("gray image", &[height, width], &[pixels.len()]));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Quantizes values in `[0, 1]` (clamped) to bytes by rounding.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| quantize(v)).collect();
        Self::new(width, height, pixels)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| Error::format(path, m))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = decode(&bytes, b"P6", 3).map_err(|m| Error::format(path, m))?;
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: raster.to_vec(),
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, String> {
    let (w, h, raster) = decode(bytes, b"P5", 1)?;
    Ok(GrayImage {
        width: w,
        height: h,
        pixels: raster.to_vec(),
    })
}

fn decode<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    channels: usize,
) -> Result<(usize, usize, &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        ));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header value too large".to_string())?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let need = w * h * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!(
            "raster truncated: {} of {need} bytes",
            raster.len()
        ));
    }
    Ok((w, h, &raster[..need]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_are_exact() {
        let img = GrayImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let mut want = b"P5\n2 2\n255\n".to_vec();
        want.extend([0, 255, 255, 0]);
        assert_eq!(encode_pgm(&img), want);
        assert_eq!(decode_pgm(&want).unwrap(), img);
    }

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5 # made by hand\n3\n1 255\n".to_vec();
        bytes.extend([1, 2, 3]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(
            (img.width, img.height, img.pixels.clone()),
            (3, 1, vec![1, 2, 3])
        );
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n2 x\n255\n").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
    }

    #[test]
    fn quantization_round_trip_within_half_step() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let img = GrayImage::from_unit(10, 10, &vals).unwrap();
        for (a, b) in img.to_unit().iter().zip(&vals) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
