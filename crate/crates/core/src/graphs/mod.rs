//! Patch graphs and attention mechanisms: adjacency construction, graph
//! attention, and importance-reweighted self-attention.

mod adjacency;
mod attention;
mod gat;

pub use adjacency::{
    feature_adjacency, feature_matrix, learnable_adjacency, learnable_matrix, spatial_adjacency,
    AdjacencyMatrix, AdjacencyStrategy,
};
pub use attention::{nsa_attention, scaled_dot_attention, AttentionOutput, ImportanceWeights};
pub use gat::{fully_connected, gat_attention, GatOutput, GatParams};
