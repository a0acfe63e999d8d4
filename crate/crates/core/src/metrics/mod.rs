//! Training losses and evaluation metrics.

mod esr;
mod fad;
mod hinge;
mod mel;

pub use esr::{esr, preemphasis, DEFAULT_PREEMPHASIS};
pub use fad::{
    embed_for_fad, frechet_distance, frechet_distance_gaussian, Embedder, EmbeddingSet, ToyEmbedder,
};
pub use hinge::{hinge_d_loss, hinge_d_loss_graph, hinge_g_loss, hinge_g_loss_graph};
pub use mel::{mel_l1, MelConfig, MelSpectrogram};
