//! Tree-augmented cross-modal encoding for text-to-video retrieval.
//!
//! A text query is parsed into a latent binary tree by scored, straight-through
//! Gumbel merges; attention over the tree's constituents yields the query
//! embedding. Videos are encoded by a GRU, multi-head self-attention over
//! frames, and temporal attention pooling. Both sides meet in a joint space
//! trained with a batch-hard margin ranking loss and evaluated with R@K/MedR.
//!
//! Everything runs on a small built-in reverse-mode differentiation core
//! ([`graph::Graph`]) in double precision on the CPU.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod joint;
pub mod model;
pub mod ops;
pub mod params;
pub mod query;
pub mod tensor;
pub mod train;
pub mod video;
pub mod vocab;

pub use config::RunConfig;
pub use data::Dataset;
pub use error::{Result, TceError};
pub use eval::RetrievalResult;
pub use graph::{Gradients, Graph, NodeId};
pub use model::TceModel;
pub use params::{AdamConfig, ParamStore};
pub use tensor::Tensor;
