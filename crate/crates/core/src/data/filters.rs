//! Image filters on `[H, W]` and `[H, W, C]` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn plane_dims(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w] => Ok((h, w)),
        [h, w, 1] => Ok((h, w)),
        _ => Err(Error::dim(op, img.shape(), &[])),
    }
}

fn require_3x3(h: usize, w: usize, op: &'static str) -> Result<()> {
    if h < 3 || w < 3 {
        return Err(Error::dim(op, &[h, w], &[3, 3]));
    }
    Ok(())
}

/// Pixel with replicate padding.
#[inline]
fn px(data: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, h as isize - 1) as usize;
    let xx = x.clamp(0, w as isize - 1) as usize;
    data[yy * w + xx]
}

/// Per-pixel `(Gx, Gy)` from the 3×3 Sobel kernels with replicate padding.
///
/// `Gx = [[-1,0,1],[-2,0,2],[-1,0,1]]`, `Gy` is its transpose.
pub fn sobel_components(image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = plane_dims(image, "sobel")?;
    require_3x3(h, w, "sobel")?;
    let d = image.data();
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| px(d, h, w, y + dy, x + dx);
            gx.push((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1)));
            gy.push((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1)));
        }
    }
    Ok((gx, gy))
}

/// Sobel gradient magnitude before rescaling.
pub fn sobel_magnitude(image: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims(image, "sobel")?;
    let (gx, gy) = sobel_components(image)?;
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    Tensor::new([h, w], mag)
}

/// Sobel gradient magnitude min-max rescaled to `[0, 1]`.
pub fn sobel_gradient(image: &Tensor) -> Result<Tensor> {
    Ok(min_max_normalize(&sobel_magnitude(image)?))
}

/// Neighbor offsets `(dy, dx)` in bit order: top-left first, then clockwise.
pub const LBP_NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// 8-neighbor, radius-1 local binary pattern codes.
///
/// Bit `k` (value `1 << k`) is set when neighbor [`LBP_NEIGHBORS`]`[k]` is
/// `>=` the center. Borders use replicate padding.
pub fn lbp(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(image, "lbp")?;
    require_3x3(h, w, "lbp")?;
    let d = image.data();
    let mut codes = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = px(d, h, w, y, x);
            let mut code = 0u8;
            for (bit, (dy, dx)) in LBP_NEIGHBORS.iter().enumerate() {
                if px(d, h, w, y + dy, x + dx) >= c {
                    code |= 1 << bit;
                }
            }
            codes.push(code);
        }
    }
    Ok(codes)
}

/// Min-max rescale to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range > 0.0 {
        t.map(|v| (v - lo) / range)
    } else {
        t.map(|_| 0.0)
    }
}

/// Bilinear resize of `[H, W]` or `[H, W, C]` with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = match *image.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("resize", image.shape(), &[out_h, out_w])),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize", image.shape(), &[out_h, out_w]));
    }
    let mut shape = image.shape().to_vec();
    shape[0] = out_h;
    shape[1] = out_w;
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Channel mean of `[H, W, C]` as `[H, W]`.
pub fn to_gray(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [_, _] => Ok(image.clone()),
        [h, w, c] => {
            let data = image
                .data()
                .chunks(c)
                .map(|px| px.iter().sum::<f64>() / c as f64)
                .collect();
            Tensor::new([h, w], data)
        }
        _ => Err(Error::dim("to_gray", image.shape(), &[])),
    }
}

/// Mirrors columns of a `[H, W]` or `[H, W, C]` tensor.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let c = image.len() / (h * w);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..][..c]);
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_plane(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([h, w], (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sobel_constant_is_zero() {
        let img = Tensor::full([5, 6], 0.7);
        assert_eq!(sobel_gradient(&img).unwrap().data(), &[0.0; 30]);
    }

    #[test]
    fn sobel_step_edge() {
        let s = 0.3;
        let (h, w) = (6, 8);
        let data = (0..h * w)
            .map(|i| if i % w >= 4 { s } else { 0.0 })
            .collect();
        let img = Tensor::new([h, w], data).unwrap();
        let (gx, gy) = sobel_components(&img).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                let expect = if x == 3 || x == 4 { 4.0 * s } else { 0.0 };
                assert!((gx[i].abs() - expect).abs() < 1e-15, "({y},{x})");
                assert_eq!(gy[i], 0.0);
            }
        }
    }

    #[test]
    fn sobel_matches_convolution_oracle() {
        let (h, w) = (9, 7);
        let img = random_plane(h, w, 1);
        let padded = |y: isize, x: isize| {
            img.at(&[
                y.clamp(0, h as isize - 1) as usize,
                x.clamp(0, w as isize - 1) as usize,
            ])
        };
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let raw = sobel_magnitude(&img).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        let v = padded(y as isize + i as isize - 1, x as isize + j as isize - 1);
                        gx += kx[i][j] * v;
                        gy += kx[j][i] * v;
                    }
                }
                assert!((raw.at(&[y, x]) - (gx * gx + gy * gy).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobel_commutes_with_flip() {
        let img = random_plane(8, 11, 2);
        let a = sobel_magnitude(&flip_horizontal(&img)).unwrap();
        let b = flip_horizontal(&sobel_magnitude(&img).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn lbp_constant_and_peak() {
        let img = Tensor::full([4, 4], 0.5);
        assert!(lbp(&img).unwrap().iter().all(|&c| c == 255));
        let mut peak = Tensor::zeros([3, 3]);
        peak.set(&[1, 1], 1.0);
        assert_eq!(lbp(&peak).unwrap()[4], 0);
    }

    /// Explicit per-pixel enumeration of the eight comparisons.
    fn lbp_oracle(img: &Tensor, y: usize, x: usize, order: &[(isize, isize); 8]) -> u8 {
        let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
        let get = |yy: isize, xx: isize| {
            img.at(&[yy.clamp(0, h - 1) as usize, xx.clamp(0, w - 1) as usize])
        };
        let c = get(y as isize, x as isize);
        let bits: Vec<u8> = order
            .iter()
            .map(|&(dy, dx)| u8::from(get(y as isize + dy, x as isize + dx) >= c))
            .collect();
        bits.iter().rev().fold(0u8, |acc, &b| (acc << 1) | b)
    }

    #[test]
    fn lbp_checkerboard_matches_enumeration() {
        let (h, w) = (6, 6);
        let data = (0..h * w)
            .map(|i| if (i / w + i % w) % 2 == 0 { 0.8 } else { 0.2 })
            .collect();
        let img = Tensor::new([h, w], data).unwrap();
        let codes = lbp(&img).unwrap();
        // interior: bright pixels see only diagonal equals, dark see everything >=
        assert_eq!(codes[w + 1] & 0b0101_0101, 0b0101_0101);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(codes[y * w + x], lbp_oracle(&img, y, x, &LBP_NEIGHBORS));
            }
        }
    }

    #[test]
    fn lbp_flip_permutes_bits() {
        let img = random_plane(7, 9, 3);
        let flipped_codes = lbp(&flip_horizontal(&img)).unwrap();
        // Mirrored bit order read on the original image must give the flipped result.
        let mirrored: [(isize, isize); 8] = LBP_NEIGHBORS.map(|(dy, dx)| (dy, -dx));
        let (h, w) = (7, 9);
        for y in 0..h {
            for x in 0..w {
                let flipped_x = w - 1 - x;
                assert_eq!(
                    flipped_codes[y * w + flipped_x],
                    lbp_oracle(&img, y, x, &mirrored)
                );
            }
        }
    }

    #[test]
    fn too_small_for_kernel() {
        let img = Tensor::zeros([2, 5]);
        assert!(matches!(sobel_gradient(&img), Err(Error::Dimension { .. })));
        assert!(lbp(&img).is_err());
    }

    #[test]
    fn resize_shapes_and_identity() {
        let img = random_plane(6, 6, 4);
        assert_eq!(resize_bilinear(&img, 6, 6).unwrap(), img);
        let up = resize_bilinear(&img, 9, 12).unwrap();
        assert_eq!(up.shape(), &[9, 12]);
        let c = Tensor::full([5, 5, 3], 0.25);
        assert!(resize_bilinear(&c, 8, 3)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_linear_ramp_is_preserved() {
        // A horizontal ramp stays linear away from clamped borders.
        let img = Tensor::new([1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resize_bilinear(&img, 1, 8).unwrap();
        let d = out.data();
        for i in 2..6 {
            assert!((d[i + 1] - d[i] - 0.5).abs() < 1e-12);
        }
    }
}
