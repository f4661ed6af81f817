//! Content-based retrieval of pulmonary nodules through learned semantic
//! embeddings.
//!
//! A small fully connected regression head is trained on fixed backbone
//! features to predict the mean radiologist rating vector. Its 10-D
//! second-to-last activation is the embedding used for exact top-k
//! retrieval. The [`evaluation`] module measures retrieval quality against
//! rater disagreement; [`analysis`] provides Ward clustering and exact t-SNE
//! over the embedding space.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the `f64` instantiations used by the file formats and the
//! evaluation pipeline.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod io;
pub mod retrieval;
pub mod scalar;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Seed used wherever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 42;

/// Default number of neighbours shown for an interactive query.
pub const DEFAULT_QUERY_K: usize = 4;

pub type HeadModel = head::HeadModel<f64>;
pub type HeadModelF32 = head::HeadModel<f32>;
pub type Embedding = head::Embedding<f64>;
pub type EmbeddingF32 = head::Embedding<f32>;
pub type Gradients = head::Gradients<f64>;
pub type RetrievalIndex = retrieval::RetrievalIndex<f64>;
pub type RetrievalIndexF32 = retrieval::RetrievalIndex<f32>;
pub type Dendrogram = analysis::ward::Dendrogram<f64>;
pub type LogNormalFit = evaluation::stats::LogNormalFit<f64>;

/// Deterministic generator used for every seeded draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
