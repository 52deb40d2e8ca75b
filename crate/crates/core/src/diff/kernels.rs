//! Raw numeric kernels shared by forward and backward rules.

use crate::error::{Error, Result};

/// Strided view of a row-major matrix: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn rowmajor(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a · b`.
pub(crate) fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], beta: f64) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert!(c.len() >= m * n);
    assert!(a.len() >= m * k && b.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every offset the kernel touches for
    // row-major (or transposed row-major) views of these slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output shape of numpy-style broadcasting, aligning from the right.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim("broadcast", a, b)),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Strides of `shape` expanded to `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = if i < pad { 1 } else { shape[i - pad] };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// How the elements of an operand map onto a broadcast output.
pub(crate) enum Bcast {
    Same,
    /// Operand repeats with period `len` (operand is a trailing block).
    Cycle(usize),
    General(Vec<usize>),
}

pub(crate) fn bcast_plan(shape: &[usize], out: &[usize]) -> Bcast {
    let n: usize = shape.iter().product();
    let total: usize = out.iter().product();
    if n == total {
        return Bcast::Same;
    }
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Bcast::Cycle(n);
    }
    Bcast::General(broadcast_strides(shape, out))
}

/// Offsets into an operand for each output element, in output order.
pub(crate) fn bcast_offsets(plan: &Bcast, out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    match plan {
        Bcast::Same => (0..total).collect(),
        Bcast::Cycle(n) => (0..total).map(|i| i % n).collect(),
        Bcast::General(strides) => {
            let mut offs = Vec::with_capacity(total);
            let mut idx = vec![0usize; out.len()];
            let mut off = 0usize;
            for _ in 0..total {
                offs.push(off);
                for ax in (0..out.len()).rev() {
                    idx[ax] += 1;
                    off += strides[ax];
                    if idx[ax] < out[ax] {
                        break;
                    }
                    off -= strides[ax] * out[ax];
                    idx[ax] = 0;
                }
            }
            offs
        }
    }
}

pub(crate) fn binary_broadcast(
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    out: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let pa = bcast_plan(ashape, out);
    let pb = bcast_plan(bshape, out);
    match (&pa, &pb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Cycle(n)) => {
            a.iter().enumerate().map(|(i, &x)| f(x, b[i % n])).collect()
        }
        (Bcast::Cycle(n), Bcast::Same) => {
            b.iter().enumerate().map(|(i, &y)| f(a[i % n], y)).collect()
        }
        _ => {
            let oa = bcast_offsets(&pa, out);
            let ob = bcast_offsets(&pb, out);
            oa.iter().zip(&ob).map(|(&i, &j)| f(a[i], b[j])).collect()
        }
    }
}

/// Sums a gradient over broadcast axes back to `shape`.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match bcast_plan(shape, out) {
        Bcast::Same => grad.to_vec(),
        Bcast::Cycle(p) => {
            let mut acc = vec![0.0; n];
            for chunk in grad.chunks(p) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            acc
        }
        plan @ Bcast::General(_) => {
            let mut acc = vec![0.0; n];
            for (g, off) in grad.iter().zip(bcast_offsets(&plan, out)) {
                acc[off] += g;
            }
            acc
        }
    }
}

/// Convolution geometry for `[B, H, W, Cin]` inputs and `[kh, kw, Cin, Cout]` kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image into `[oh*ow, kh*kw*cin]` rows.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * plen..][..plen];
            let mut r = 0;
            for ky in 0..g.kh {
                let y = oy * g.stride + ky;
                let src = &img[(y * g.w + ox * g.stride) * g.cin..][..g.kw * g.cin];
                row[r..r + src.len()].copy_from_slice(src);
                r += src.len();
            }
        }
    }
}

/// Scatter-adds `[oh*ow, kh*kw*cin]` rows back into one image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * plen..][..plen];
            let mut r = 0;
            for ky in 0..g.kh {
                let y = oy * g.stride + ky;
                let dst = &mut img[(y * g.w + ox * g.stride) * g.cin..][..g.kw * g.cin];
                for (d, s) in dst.iter_mut().zip(&row[r..]) {
                    *d += s;
                }
                r += g.kw * g.cin;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn general_offsets_match_manual_indexing() {
        // [2,1,3] broadcast to [2,4,3]
        let offs = bcast_offsets(&bcast_plan(&[2, 1, 3], &[2, 4, 3]), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    assert_eq!(offs[(i * 4 + j) * 3 + k], i * 3 + k);
                }
            }
        }
    }

    #[test]
    fn reduce_inverts_cycle() {
        let g = vec![1.0; 6];
        assert_eq!(reduce_to(&g, &[2, 3], &[3]), vec![2.0; 3]);
        assert_eq!(reduce_to(&g, &[2, 3], &[2, 1]), vec![3.0; 2]);
    }
}
