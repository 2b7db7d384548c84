//! Grid-level open-vocabulary detection: a one-stage anchor-free detector whose
//! dense per-cell embeddings are scored against category text embeddings by
//! cosine similarity, trained with focal loss plus an image-level L1
//! distillation from a frozen teacher embedder.

pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod postprocess;
pub mod targets;
pub mod teacher;
pub mod tensor;
pub mod text_bank;
pub mod train;

pub use error::{Error, Result};
