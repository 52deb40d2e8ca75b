//! The computation record and its primitive catalog.
//!
//! Every primitive pushes one node holding its forward value. Inputs always
//! precede their consumers, so a single reverse sweep over the node list is a
//! valid topological traversal for backpropagation.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvGeom, MatView};
use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    MatMul(Var, Var),
    Softmax(Var),
    WeightedSoftmax {
        logits: Var,
        weights: Var,
        row_max: Vec<f64>,
        row_sum: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CosineGram {
        h: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::SumAll(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::MatMul(..) => "matmul",
            Op::Softmax(_) => "softmax",
            Op::WeightedSoftmax { .. } => "weighted_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Dropout { .. } => "dropout",
            Op::CosineGram { .. } => "cosine_gram",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Embedding norms at or below this are treated as zero vectors.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} output (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported in [`Gradients`] (e.g. input pixels).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let data = kernels::binary_broadcast(ta.data(), ta.shape(), tb.data(), tb.shape(), &out, f);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(out, data), op, ng)
    }

    /// Elementwise sum with broadcasting aligned from the right.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        let ng = self.needs(x);
        self.push(value, Op::Exp(x), ng)
    }

    /// Natural logarithm; non-positive inputs are an error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Range {
                what: "ln argument",
                value: bad.to_string(),
            });
        }
        let value = t.map(f64::ln);
        let ng = self.needs(x);
        self.push(value, Op::Ln(x), ng)
    }

    // ---- reductions and reshaping ----------------------------------------

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let ng = self.needs(x);
        self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }, ng)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|_| Error::dim("reshape", self.shape(x), shape))?;
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", &shape, axes));
        }
        let (oshape, data) = permute_data(self.value(x).data(), &shape, axes);
        let ng = self.needs(x);
        self.push(
            Tensor::from_parts(oshape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::from_parts(oshape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Selects slices `index[i]` along `axis`; indices may repeat or be omitted.
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::dim("gather", &shape, index));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                data.extend_from_slice(&src[(o * len + i) * inner..][..inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = index.len();
        let ng = self.needs(x);
        self.push(
            Tensor::from_parts(oshape, data),
            Op::Gather {
                x,
                axis,
                index: index.to_vec(),
            },
            ng,
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` may be a shared `[k, n]` matrix (leading axes of `a` are flattened)
    /// or carry the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let spec = MatmulSpec::new(&sa, &sb)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; spec.batch * spec.m * spec.n];
        spec.forward(ta, tb, &mut out);
        let mut oshape = sa[..sa.len() - 1].to_vec();
        oshape.push(spec.n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(oshape, out), Op::MatMul(a, b), ng)
    }

    /// Softmax over the last axis, computed with the row maximum subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Row normalization of `weights ⊙ exp(logits)` over the last axis.
    ///
    /// `weights` must be nonnegative and either match `logits` or match its
    /// trailing axes (shared across leading batch axes). Entries with zero
    /// weight get exactly zero probability; a row with no positive weight is
    /// an error.
    pub fn weighted_softmax(&mut self, logits: Var, weights: Var) -> Result<Var> {
        let (tl, tw) = (self.value(logits), self.value(weights));
        let n = *tl.shape().last().unwrap();
        if !tl.shape().ends_with(tw.shape()) || tw.shape().is_empty() {
            return Err(Error::dim("weighted_softmax", tl.shape(), tw.shape()));
        }
        let w = tw.data();
        if let Some(bad) = w.iter().find(|&&v| v < 0.0) {
            return Err(Error::Contract(format!("negative attention weight {bad}")));
        }
        let wrows = w.len() / n;
        let rows = tl.len() / n;
        let mut data = tl.data().to_vec();
        let mut row_max = Vec::with_capacity(rows);
        let mut row_sum = Vec::with_capacity(rows);
        for (r, row) in data.chunks_mut(n).enumerate() {
            let wr = &w[(r % wrows) * n..][..n];
            let m = row
                .iter()
                .zip(wr)
                .filter(|(_, &wk)| wk > 0.0)
                .map(|(&e, _)| e)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::DegenerateNeighborhood { row: r % wrows });
            }
            let mut z = 0.0;
            for (e, &wk) in row.iter_mut().zip(wr) {
                *e = if wk > 0.0 { wk * (*e - m).exp() } else { 0.0 };
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
            row_max.push(m);
            row_sum.push(z);
        }
        let value = Tensor::from_parts(tl.shape().to_vec(), data);
        let ng = self.needs(logits) || self.needs(weights);
        self.push(
            value,
            Op::WeightedSoftmax {
                logits,
                weights,
                row_max,
                row_sum,
            },
            ng,
        )
    }

    /// Standardizes the last axis and applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", t.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.len() / d;
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Valid (unpadded) convolution of `[H, W, Cin]` or `[B, H, W, Cin]` input
    /// with `[kh, kw, Cin, Cout]` kernels.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let (batch, h, w, cin) = match sx[..] {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::dim("conv2d", &sx, &sk)),
        };
        let [kh, kw, kc, cout] = sk[..] else {
            return Err(Error::dim("conv2d", &sx, &sk));
        };
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if kh > h || kw > w || kc != cin {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        let geom = ConvGeom {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        };
        let (tx, tk) = (self.value(x).data(), self.value(kernel).data());
        let (p, plen) = (geom.out_positions(), geom.patch_len());
        let mut cols = vec![0.0; p * plen];
        let mut out = vec![0.0; batch * p * cout];
        for bi in 0..batch {
            kernels::im2col(&tx[bi * h * w * cin..][..h * w * cin], &geom, &mut cols);
            kernels::gemm(
                &cols,
                MatView::rowmajor(p, plen),
                tk,
                MatView::rowmajor(plen, cout),
                &mut out[bi * p * cout..][..p * cout],
                0.0,
            );
        }
        let oshape = if sx.len() == 3 {
            vec![geom.oh, geom.ow, cout]
        } else {
            vec![batch, geom.oh, geom.ow, cout]
        };
        let ng = self.needs(x) || self.needs(kernel);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::Conv2d { x, kernel, geom },
            ng,
        )
    }

    /// 2×2 max pooling with stride 2 over `[B, H, W, C]`; odd trailing rows
    /// and columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [b, h, w, c] = sx[..] else {
            return Err(Error::dim("max_pool2", &sx, &[2, 2]));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim("max_pool2", &sx, &[2, 2]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if src[idx] > best_v || best == usize::MAX {
                                best = idx;
                                best_v = src[idx];
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_parts(vec![b, oh, ow, c], out),
            Op::MaxPool2 { x, argmax },
            ng,
        )
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Range {
                what: "dropout rate",
                value: rate.to_string(),
            });
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-supplied (already scaled) mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::dim("dropout", t.shape(), &[mask.len()]));
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, ng)
    }

    /// Pairwise cosine similarity of the rows of `[..., N, d]`.
    ///
    /// Rows with norm at most [`COSINE_NORM_FLOOR`] are similar only to
    /// themselves (1 on the diagonal, 0 elsewhere).
    pub fn cosine_gram(&mut self, h: Var) -> Result<Var> {
        let s = self.shape(h).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("cosine_gram", &s, &[]));
        }
        let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(h).data();
        let mut norms = Vec::with_capacity(batch * n);
        let mut out = vec![0.0; batch * n * n];
        for b in 0..batch {
            let hb = &src[b * n * d..][..n * d];
            let nb: Vec<f64> = hb
                .chunks(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let ob = &mut out[b * n * n..][..n * n];
            for i in 0..n {
                for j in 0..n {
                    ob[i * n + j] = if i == j {
                        1.0
                    } else if nb[i] <= COSINE_NORM_FLOOR || nb[j] <= COSINE_NORM_FLOOR {
                        0.0
                    } else {
                        let dot: f64 = hb[i * d..][..d]
                            .iter()
                            .zip(&hb[j * d..][..d])
                            .map(|(a, b)| a * b)
                            .sum();
                        dot / (nb[i] * nb[j])
                    };
                }
            }
            norms.extend(nb);
        }
        let mut oshape = s[..s.len() - 2].to_vec();
        oshape.extend([n, n]);
        let ng = self.needs(h);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::CosineGram { h, norms },
            ng,
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Backpropagates from a single-element `loss`, adding parameter gradients
    /// into `store` (they accumulate until [`ParameterStore::zero_grad`]).
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g.data(), &mut grads, store)?;
            grads[i] = Some(g);
        }
        store.set_gradients_pending(true);
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), g));
            }
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Tensor>],
        store: &mut ParameterStore,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                self.acc(grads, *a, kernels::reduce_to(g, out_shape, self.shape(*a)));
                self.acc(grads, *b, kernels::reduce_to(g, out_shape, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, kernels::reduce_to(g, out_shape, self.shape(*a)));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(
                    grads,
                    *b,
                    kernels::reduce_to(&neg, out_shape, self.shape(*b)),
                );
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pa =
                    kernels::bcast_offsets(&kernels::bcast_plan(ta.shape(), out_shape), out_shape);
                let pb =
                    kernels::bcast_offsets(&kernels::bcast_plan(tb.shape(), out_shape), out_shape);
                let (da, db) = (ta.data(), tb.data());
                let is_div = matches!(node.op, Op::Div(..));
                if self.needs(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&pb)
                        .map(|(gv, &j)| if is_div { gv / db[j] } else { gv * db[j] })
                        .collect();
                    self.acc(grads, *a, kernels::reduce_to(&ga, out_shape, ta.shape()));
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(pa.iter().zip(&pb))
                        .map(|(gv, (&ia, &jb))| {
                            if is_div {
                                -gv * da[ia] / (db[jb] * db[jb])
                            } else {
                                gv * da[ia]
                            }
                        })
                        .collect();
                    self.acc(grads, *b, kernels::reduce_to(&gb, out_shape, tb.shape()));
                }
            }
            Op::Scale(x, f) => self.acc(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => {
                let ys = node.value.data();
                self.acc(grads, *x, g.iter().zip(ys).map(|(a, b)| a * b).collect());
            }
            Op::Ln(x) => {
                let xs = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(xs).map(|(a, b)| a / b).collect());
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..][..inner]);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, gx) = permute_data(g, out_shape, &inv);
                self.acc(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[(o * total + start) * inner..][..len * inner]);
                        }
                        self.acc(grads, v, gv);
                    }
                    start += len;
                }
            }
            Op::Gather { x, axis, index } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (k, &src) in index.iter().enumerate() {
                        let from = &g[(o * index.len() + k) * inner..][..inner];
                        for (d, s) in gx[(o * len + src) * inner..][..inner].iter_mut().zip(from) {
                            *d += s;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let spec = MatmulSpec::new(self.shape(*a), self.shape(*b))?;
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    spec.grad_a(g, tb, &mut ga);
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; tb.len()];
                    spec.grad_b(ta, g, &mut gb);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                let y = node.value.data();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.acc(grads, *x, gx);
            }
            Op::WeightedSoftmax {
                logits,
                weights,
                row_max,
                row_sum,
            } => {
                let n = *out_shape.last().unwrap();
                let y = node.value.data();
                let e = self.value(*logits).data();
                let tw = self.value(*weights);
                let wrows = tw.len() / n;
                let mut ge = Vec::with_capacity(y.len());
                let mut gw = vec![0.0; tw.len()];
                for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ge.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    let er = &e[r * n..][..n];
                    let gwr = &mut gw[(r % wrows) * n..][..n];
                    for j in 0..n {
                        let u = (er[j] - row_max[r]).exp() / row_sum[r];
                        gwr[j] += u * (gr[j] - dot);
                    }
                }
                self.acc(grads, *logits, ge);
                self.acc(grads, *weights, gw);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let gam = self.value(*gamma).data();
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dx = 0.0;
                    let mut mean_dxx = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        mean_dx += dxh;
                        mean_dxx += dxh * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                    mean_dx /= d as f64;
                    mean_dxx /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        gx.push(rstd[r] * (dxh - mean_dx - xr[j] * mean_dxx));
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::Conv2d { x, kernel, geom } => {
                let (tx, tk) = (self.value(*x).data(), self.value(*kernel).data());
                let (p, plen, cout) = (geom.out_positions(), geom.patch_len(), geom.cout);
                let img = geom.h * geom.w * geom.cin;
                let mut cols = vec![0.0; p * plen];
                let mut gk = vec![0.0; tk.len()];
                let mut gx = vec![0.0; if self.needs(*x) { tx.len() } else { 0 }];
                for bi in 0..geom.batch {
                    let gout = &g[bi * p * cout..][..p * cout];
                    if self.needs(*kernel) {
                        kernels::im2col(&tx[bi * img..][..img], geom, &mut cols);
                        kernels::gemm(
                            &cols,
                            MatView::rowmajor(p, plen).t(),
                            gout,
                            MatView::rowmajor(p, cout),
                            &mut gk,
                            1.0,
                        );
                    }
                    if self.needs(*x) {
                        kernels::gemm(
                            gout,
                            MatView::rowmajor(p, cout),
                            tk,
                            MatView::rowmajor(plen, cout).t(),
                            &mut cols,
                            0.0,
                        );
                        kernels::col2im(&cols, geom, &mut gx[bi * img..][..img]);
                    }
                }
                self.acc(grads, *kernel, gk);
                if self.needs(*x) {
                    self.acc(grads, *x, gx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                self.acc(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect());
            }
            Op::CosineGram { h, norms } => {
                let s = self.shape(*h);
                let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = norms.len() / n;
                let src = self.value(*h).data();
                let mut gh = vec![0.0; src.len()];
                for b in 0..batch {
                    let hb = &src[b * n * d..][..n * d];
                    let nb = &norms[b * n..][..n];
                    let gb = &g[b * n * n..][..n * n];
                    let live = |i: usize| nb[i] > COSINE_NORM_FLOOR;
                    for i in (0..n).filter(|&i| live(i)) {
                        // dU_i = Σ_j (G_ij + G_ji) u_j over live j ≠ i
                        let mut du = vec![0.0; d];
                        for j in (0..n).filter(|&j| j != i && live(j)) {
                            let w = (gb[i * n + j] + gb[j * n + i]) / nb[j];
                            for (acc, v) in du.iter_mut().zip(&hb[j * d..][..d]) {
                                *acc += w * v;
                            }
                        }
                        let hi = &hb[i * d..][..d];
                        let proj: f64 = du.iter().zip(hi).map(|(a, v)| a * v).sum::<f64>() / nb[i];
                        let out = &mut gh[(b * n + i) * d..][..d];
                        for k in 0..d {
                            out[k] = (du[k] - proj * hi[k] / nb[i]) / nb[i];
                        }
                    }
                }
                self.acc(grads, *h, gh);
            }
        }
        Ok(())
    }
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let ostrides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        return (oshape, src.to_vec());
    }
    // Iterate the output row-major; copy the innermost axis as a strided run.
    let last = rank - 1;
    let (run, run_stride) = (oshape[last], ostrides[last]);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let outer: usize = oshape[..last].iter().product();
    for _ in 0..outer {
        out.extend((0..run).map(|k| src[off + k * run_stride]));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            off += ostrides[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            off -= ostrides[ax] * oshape[ax];
            idx[ax] = 0;
        }
    }
    (oshape, out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

struct MatmulSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatmulSpec {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        if sb.len() == 2 {
            // Flatten leading axes of `a` into rows.
            return Ok(MatmulSpec {
                batch: 1,
                m: batch_a * m,
                k,
                n,
                shared_b: true,
            });
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("matmul", sa, sb));
        }
        Ok(MatmulSpec {
            batch: batch_a,
            m,
            k,
            n,
            shared_b: false,
        })
    }

    fn b_stride(&self) -> usize {
        if self.shared_b {
            0
        } else {
            self.k * self.n
        }
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            kernels::gemm(
                &a[bi * m * k..],
                MatView::rowmajor(m, k),
                &b[bi * self.b_stride()..],
                MatView::rowmajor(k, n),
                &mut c[bi * m * n..][..m * n],
                0.0,
            );
        }
    }

    /// `dA = dC · Bᵀ`
    fn grad_a(&self, gc: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            kernels::gemm(
                &gc[bi * m * n..],
                MatView::rowmajor(m, n),
                &b[bi * self.b_stride()..],
                MatView::rowmajor(k, n).t(),
                &mut ga[bi * m * k..][..m * k],
                0.0,
            );
        }
    }

    /// `dB = Aᵀ · dC`, summed over the batch when `B` is shared.
    fn grad_b(&self, a: &[f64], gc: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let off = bi * self.b_stride();
            kernels::gemm(
                &a[bi * m * k..],
                MatView::rowmajor(m, k).t(),
                &gc[bi * m * n..],
                MatView::rowmajor(m, n),
                &mut gb[off..][..k * n],
                if self.shared_b { 1.0 } else { 0.0 },
            );
        }
    }
}
