use crate::diff::{Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-patch learnable importance scores, one per key position.
#[derive(Clone, Copy, Debug)]
pub struct ImportanceWeights {
    pub id: ParamId,
    pub n: usize,
}

impl ImportanceWeights {
    /// Registers `n` importance weights initialized to zero.
    pub fn register(store: &mut ParameterStore, name: &str, n: usize) -> Result<Self> {
        let id = store.add(name, Tensor::zeros([n]))?;
        Ok(ImportanceWeights { id, n })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[..., N, N]` row-stochastic attention.
    pub attn: Var,
    /// `[..., N, d_head]`
    pub out: Var,
}

/// Scaled dot-product attention over `[..., N, d_head]` queries, keys and
/// values, optionally reweighted by key importance.
///
/// With importance `w`, each row becomes
/// `attn_ij = s_ij exp(w_j) / Σ_k s_ik exp(w_k)` where `s = softmax(q kᵀ / √d_head)`.
/// This equals `softmax(q kᵀ / √d_head + w_j)`, which is how it is evaluated;
/// at `w = 0` the result is bit-identical to unweighted attention.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    importance: Option<Var>,
) -> Result<AttentionOutput> {
    let qs = g.shape(q).to_vec();
    if qs.len() < 2
        || g.shape(k) != qs.as_slice()
        || g.shape(v)[..qs.len() - 1] != qs[..qs.len() - 1]
    {
        return Err(Error::dim("attention", &qs, g.shape(k)));
    }
    let d_head = qs[qs.len() - 1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d_head as f64).sqrt())?;
    if let Some(w) = importance {
        let n = qs[qs.len() - 2];
        if g.shape(w) != [n] {
            return Err(Error::dim("nsa_attention", &qs, g.shape(w)));
        }
        logits = g.add(logits, w)?;
    }
    let attn = g.softmax(logits)?;
    let out = g.matmul(attn, v)?;
    Ok(AttentionOutput { attn, out })
}

/// Importance-reweighted ("non-symmetric") attention with stored weights.
pub fn nsa_attention(
    g: &mut Graph,
    store: &ParameterStore,
    q: Var,
    k: Var,
    v: Var,
    weights: &ImportanceWeights,
) -> Result<AttentionOutput> {
    let w = g.param(store, weights.id);
    scaled_dot_attention(g, q, k, v, Some(w))
}
