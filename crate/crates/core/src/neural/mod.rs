//! NeuMiss / NeuMISE embeddings, the MLP head, training and grid search.

pub mod embedding;
pub mod grid;
pub mod network;
pub mod train;

pub use embedding::{neumann_blocks, neumise_forward, neumiss_forward, EmbeddingKind, EmbeddingSpec, DEFAULT_N_BLOCKS};
pub use grid::{grid_search, GridPoint, GridResult, GridSpace};
pub use network::{Architecture, BnMode, NetInput, Network};
pub use train::{train, EpochOutcome, Plateau, TrainConfig, TrainData, TrainReport};
