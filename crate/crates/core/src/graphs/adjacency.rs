use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyStrategy {
    Spatial,
    Learnable,
    Feature,
}

/// `N × N` patch-relationship weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub values: Tensor,
    pub strategy: AdjacencyStrategy,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    /// Row-major CSV with 17 significant digits per entry.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut out = String::new();
        for row in self.values.data().chunks(n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Gaussian kernel on patch-grid distance: `A_ij = exp(-d_ij² / (2σ²))`,
/// where `d_ij` is measured in patch units between `(row, col)` positions.
pub fn spatial_adjacency(grid_h: usize, grid_w: usize, sigma: f64) -> Result<AdjacencyMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::Range {
            what: "sigma",
            value: sigma.to_string(),
        });
    }
    let n = grid_h * grid_w;
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = ((i / grid_w) as f64, (i % grid_w) as f64);
        for j in 0..n {
            let (rj, cj) = ((j / grid_w) as f64, (j % grid_w) as f64);
            let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
            values.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(AdjacencyMatrix {
        values: Tensor::new([n, n], values)?,
        strategy: AdjacencyStrategy::Spatial,
    })
}

/// Registers a trainable `N × N` adjacency `θ`, initialized to all ones.
pub fn learnable_adjacency(store: &mut ParameterStore, name: &str, n: usize) -> Result<ParamId> {
    if n == 0 {
        return Err(Error::Contract("adjacency needs at least one node".into()));
    }
    store.add(name, Tensor::ones([n, n]))
}

pub fn learnable_matrix(store: &ParameterStore, id: ParamId) -> AdjacencyMatrix {
    AdjacencyMatrix {
        values: store.value(id).clone(),
        strategy: AdjacencyStrategy::Learnable,
    }
}

/// Cosine similarity of patch embeddings `[..., N, d]`, recorded on the graph.
pub fn feature_adjacency(g: &mut Graph, embeddings: Var) -> Result<Var> {
    g.cosine_gram(embeddings)
}

/// Value-only [`feature_adjacency`] of one `[N, d]` embedding matrix.
pub fn feature_matrix(embeddings: &Tensor) -> Result<AdjacencyMatrix> {
    if embeddings.rank() != 2 {
        return Err(Error::dim("feature_adjacency", embeddings.shape(), &[]));
    }
    let mut g = Graph::new();
    let h = g.constant(embeddings.clone());
    let a = g.cosine_gram(h)?;
    Ok(AdjacencyMatrix {
        values: g.value(a).clone(),
        strategy: AdjacencyStrategy::Feature,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn spatial_examples() {
        let a = spatial_adjacency(7, 7, 1.0).unwrap();
        for i in 0..49 {
            assert_eq!(a.values.at(&[i, i]), 1.0);
        }
        assert!((a.values.at(&[0, 1]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((a.values.at(&[0, 1]) - 0.60653).abs() < 1e-5);
        assert!(spatial_adjacency(2, 2, 0.0).is_err());
    }

    #[test]
    fn spatial_matches_pairwise_oracle() {
        let (gh, gw, sigma) = (7, 7, 1.0);
        let a = spatial_adjacency(gh, gw, sigma).unwrap();
        let coords: Vec<(f64, f64)> = (0..gh)
            .flat_map(|r| (0..gw).map(move |c| (r as f64, c as f64)))
            .collect();
        for (i, p) in coords.iter().enumerate() {
            for (j, q) in coords.iter().enumerate() {
                let d = ((p.0 - q.0).hypot(p.1 - q.1)).powi(2);
                let want = (-d / (2.0 * sigma * sigma)).exp();
                assert!((a.values.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_is_symmetric_and_rotation_invariant() {
        let n = 5;
        let a = spatial_adjacency(n, n, 1.3).unwrap();
        // 90° rotation of the grid: (r, c) -> (c, n-1-r)
        let rot = |i: usize| (i % n) * n + (n - 1 - i / n);
        for i in 0..n * n {
            for j in 0..n * n {
                let v = a.values.at(&[i, j]);
                assert!(v > 0.0 && v <= 1.0);
                assert_eq!(v, a.values.at(&[j, i]));
                assert!((v - a.values.at(&[rot(i), rot(j)])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn feature_examples() {
        let h = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 2.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let a = feature_matrix(&h).unwrap();
        assert!((a.values.at(&[0, 1]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(a.values.at(&[0, 2]), 0.0);
        assert!((a.values.at(&[0, 3]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_degenerate_rows() {
        let h = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let a = feature_matrix(&h).unwrap();
        assert_eq!(a.values.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn feature_is_scale_invariant_and_bounded() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::new([6, 4], (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let a = feature_matrix(&h).unwrap();
        let b = feature_matrix(&h.map(|v| 37.5 * v)).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-12);
        for i in 0..6 {
            for j in 0..6 {
                let v = a.values.at(&[i, j]);
                assert!((-1.0..=1.0).contains(&v));
                assert!((v - a.values.at(&[j, i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn learnable_starts_at_ones() {
        let mut s = ParameterStore::new();
        let id = learnable_adjacency(&mut s, "theta", 4).unwrap();
        assert_eq!(learnable_matrix(&s, id).values, Tensor::ones([4, 4]));
    }

    #[test]
    fn csv_export_round_trips() {
        let a = spatial_adjacency(2, 3, 0.7).unwrap();
        let text = a.to_csv();
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| {
                l.split(',')
                    .map(|c| c.parse::<f64>().unwrap())
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(parsed, a.values.data());
        assert_eq!(text.lines().count(), 6);
    }
}
