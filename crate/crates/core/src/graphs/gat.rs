use rand::Rng;

use crate::diff::{truncated_normal, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-head graph attention layer: projection `W` and attention vector `a`.
#[derive(Clone, Copy, Debug)]
pub struct GatParams {
    /// `[d_in, d_out]`
    pub w: ParamId,
    /// `[2 * d_out, 1]`; the first half scores the query node, the second the neighbor.
    pub a: ParamId,
    pub d_out: usize,
}

impl GatParams {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{prefix}.w"),
            truncated_normal(&[d_in, d_out], std, rng),
        )?;
        let a = store.add(
            format!("{prefix}.a"),
            truncated_normal(&[2 * d_out, 1], std, rng),
        )?;
        Ok(GatParams { w, a, d_out })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    /// `[..., N, N]` attention coefficients.
    pub alpha: Var,
    /// `[..., N, d_out]` aggregated features.
    pub h_out: Var,
}

/// Graph attention over node features `h: [..., N, d_in]`.
///
/// ```text
/// e_ij = ReLU(aᵀ [W h_i ‖ W h_j])
/// α_ij = A⁺_ij exp(e_ij) / Σ_k A⁺_ik exp(e_ik)      A⁺ = max(A, 0)
/// h'_i = Σ_j α_ij W h_j
/// ```
///
/// `adjacency` is `[N, N]` (shared across the batch) or `[..., N, N]`. With a
/// binary adjacency this is the usual masked GAT softmax.
pub fn gat_attention(
    g: &mut Graph,
    store: &ParameterStore,
    h: Var,
    params: &GatParams,
    adjacency: Var,
) -> Result<GatOutput> {
    let hs = g.shape(h).to_vec();
    if hs.len() < 2 {
        return Err(Error::dim("gat_attention", &hs, g.shape(adjacency)));
    }
    let n = hs[hs.len() - 2];
    let a_shape = g.shape(adjacency);
    if a_shape.len() < 2 || a_shape[a_shape.len() - 1] != n || a_shape[a_shape.len() - 2] != n {
        return Err(Error::dim("gat_attention", &hs, a_shape));
    }
    let w = g.param(store, params.w);
    let a = g.param(store, params.a);
    let d = params.d_out;
    let wh = g.matmul(h, w)?;
    let a_src = g.gather(a, 0, &(0..d).collect::<Vec<_>>())?;
    let a_dst = g.gather(a, 0, &(d..2 * d).collect::<Vec<_>>())?;
    let s = g.matmul(wh, a_src)?; // [..., N, 1]
    let t = g.matmul(wh, a_dst)?; // [..., N, 1]
    let mut t_shape = hs[..hs.len() - 2].to_vec();
    t_shape.extend([1, n]);
    let t = g.reshape(t, &t_shape)?;
    let e = g.add(s, t)?;
    let e = g.relu(e)?;
    let weights = g.relu(adjacency)?;
    let alpha = g.weighted_softmax(e, weights)?;
    let h_out = g.matmul(alpha, wh)?;
    Ok(GatOutput { alpha, h_out })
}

/// All-ones `[n, n]` adjacency (fully connected graph).
pub fn fully_connected(n: usize) -> Tensor {
    Tensor::ones([n, n])
}
