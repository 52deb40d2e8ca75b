use rand::Rng;

use crate::diff::{truncated_normal, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::graphs::scaled_dot_attention;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Dense {
            w: store.add(
                format!("{prefix}.w"),
                truncated_normal(&[d_in, d_out], INIT_STD, rng),
            )?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros([d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([d]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Non-overlapping patch projection (stride = kernel) plus learned positions.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub position: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        patch: usize,
        channels: usize,
        num_patches: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PatchEmbed {
            kernel: store.add(
                "patch.kernel",
                truncated_normal(&[patch, patch, channels, dim], INIT_STD, rng),
            )?,
            bias: store.add("patch.bias", Tensor::zeros([dim]))?,
            position: store.add(
                "patch.position",
                truncated_normal(&[num_patches, dim], INIT_STD, rng),
            )?,
            patch,
        })
    }

    /// `[B, H, W, C]` images to `[B, N, D]` tokens in row-major patch order.
    /// Pixels beyond the last whole patch are dropped.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] < self.patch || s[2] < self.patch {
            return Err(Error::dim(
                "patchify_embed",
                &s,
                store.value(self.kernel).shape(),
            ));
        }
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let pos = g.param(store, self.position);
        let x = g.conv2d(images, k, self.patch)?;
        let xs = g.shape(x).to_vec();
        let x = g.reshape(x, &[xs[0], xs[1] * xs[2], xs[3]])?;
        let x = g.add(x, b)?;
        g.add(x, pos)
    }
}

/// Token order used by windowed attention: `perm[p]` is the original token
/// placed at windowed position `p`, after a cyclic shift of `shift` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
    pub window_tokens: usize,
}

impl WindowLayout {
    pub fn new(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || !grid_h.is_multiple_of(window) || !grid_w.is_multiple_of(window) {
            return Err(Error::Config(format!(
                "patch grid {grid_h}x{grid_w} is not tiled by {window}x{window} windows"
            )));
        }
        let mut perm = Vec::with_capacity(grid_h * grid_w);
        for wr in 0..grid_h / window {
            for wc in 0..grid_w / window {
                for i in 0..window {
                    for j in 0..window {
                        let r = (wr * window + i + shift) % grid_h;
                        let c = (wc * window + j + shift) % grid_w;
                        perm.push(r * grid_w + c);
                    }
                }
            }
        }
        let mut inverse = vec![0; perm.len()];
        for (p, &t) in perm.iter().enumerate() {
            inverse[t] = p;
        }
        Ok(WindowLayout {
            perm,
            inverse,
            window_tokens: window * window,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.perm.len() / self.window_tokens
    }

    /// Expands per-window attention `[B, nW, H, T, T]` to token-order `[B, H, N, N]`.
    pub fn scatter(&self, windowed: &Tensor) -> Tensor {
        let s = windowed.shape();
        let (b, nw, heads, t) = (s[0], s[1], s[2], s[3]);
        let n = nw * t;
        let mut out = Tensor::zeros([b, heads, n, n]);
        let src = windowed.data();
        let dst = out.data_mut();
        for bi in 0..b {
            for w in 0..nw {
                for h in 0..heads {
                    for i in 0..t {
                        let row = self.perm[w * t + i];
                        for j in 0..t {
                            let col = self.perm[w * t + j];
                            dst[((bi * heads + h) * n + row) * n + col] =
                                src[(((bi * nw + w) * heads + h) * t + i) * t + j];
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
}

pub struct MhsaOutput {
    /// `[B, N, D]`
    pub out: Var,
    /// `[B, H, N, N]`, or `[B, nW, H, T, T]` when windowed.
    pub attn: Var,
}

impl MultiHeadAttention {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Dense::register(store, &format!("{prefix}.q"), dim, dim, rng)?,
            k: Dense::register(store, &format!("{prefix}.k"), dim, dim, rng)?,
            v: Dense::register(store, &format!("{prefix}.v"), dim, dim, rng)?,
            out: Dense::register(store, &format!("{prefix}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// Self-attention on `[B, N, D]`, optionally restricted to windows and
    /// biased by key importance logits `[N]` (or `[T]` when windowed).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        importance: Option<Var>,
        windows: Option<&WindowLayout>,
    ) -> Result<MhsaOutput> {
        let s = g.shape(x).to_vec();
        let [b, n, d] = s[..] else {
            return Err(Error::dim("multi_head_attention", &s, &[]));
        };
        let (x, batch, tokens) = match windows {
            Some(wl) => {
                let xp = g.gather(x, 1, &wl.perm)?;
                let nw = wl.num_windows();
                (
                    g.reshape(xp, &[b * nw, wl.window_tokens, d])?,
                    b * nw,
                    wl.window_tokens,
                )
            }
            None => (x, b, n),
        };
        let dh = d / self.heads;
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[batch, tokens, self.heads, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.q.forward(g, store, x)?;
        let q = split(g, q)?;
        let k = self.k.forward(g, store, x)?;
        let k = split(g, k)?;
        let v = self.v.forward(g, store, x)?;
        let v = split(g, v)?;
        let o = scaled_dot_attention(g, q, k, v, importance)?;
        let merged = g.permute(o.out, &[0, 2, 1, 3])?;
        let mut merged = g.reshape(merged, &[b, n, d])?;
        let mut attn = o.attn;
        if let Some(wl) = windows {
            merged = g.gather(merged, 1, &wl.inverse)?;
            attn = g.reshape(attn, &[b, wl.num_windows(), self.heads, tokens, tokens])?;
        }
        let out = self.out.forward(g, store, merged)?;
        Ok(MhsaOutput { out, attn })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Dense,
    pub down: Dense,
}

impl FeedForward {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Dense::register(store, &format!("{prefix}.up"), dim, hidden, rng)?,
            down: Dense::register(store, &format!("{prefix}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct BlockOutput {
    pub out: Var,
    pub attn: Var,
}

impl TransformerBlock {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::register(store, &format!("{prefix}.norm1"), dim)?,
            attn: MultiHeadAttention::register(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::register(store, &format!("{prefix}.norm2"), dim)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), dim, ffn_dim, rng)?,
        })
    }

    /// Pre-norm block. With `residual`, `u = x + MHSA(LN x)` and
    /// `y = u + FFN(LN u)`; without, the skips are omitted.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        importance: Option<Var>,
        windows: Option<&WindowLayout>,
        residual: bool,
    ) -> Result<BlockOutput> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, importance, windows)?;
        let u = if residual { g.add(x, a.out)? } else { a.out };
        let h = self.norm2.forward(g, store, u)?;
        let f = self.ffn.forward(g, store, h)?;
        let out = if residual { g.add(u, f)? } else { f };
        Ok(BlockOutput { out, attn: a.attn })
    }
}

/// Regression head: dense(hidden, ReLU) → dropout → dense(1).
#[derive(Clone, Copy, Debug)]
pub struct RegressionHead {
    pub hidden: Dense,
    pub out: Dense,
}

impl RegressionHead {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(RegressionHead {
            hidden: Dense::register(store, "head.hidden", d_in, hidden, rng)?,
            out: Dense::register(store, "head.out", hidden, 1, rng)?,
        })
    }

    /// `[B, d_in]` features to `[B]` predictions.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let mut h = g.relu(h)?;
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                h = g.dropout(h, rate, rng)?;
            }
        }
        let y = self.out.forward(g, store, h)?;
        let b = g.shape(y)[0];
        g.reshape(y, &[b])
    }
}
