//! End-to-end formula image recognition at desk scale.
//!
//! The pipeline turns a LaTeX corpus into a rendered, length-balanced dataset
//! (`data_builder`), trains a windowed-attention encoder / autoregressive
//! decoder with an auxiliary symbol-count head (`model`, `train`), and scores
//! predictions with BLEU, edit distance and exact-match rates (`eval`).
//! `latex_norm` provides the canonical markup form shared by every stage.

pub mod augment;
pub mod data_builder;
pub mod eval;
pub mod latex_norm;
pub mod model;
pub mod render;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use latex_norm::{CountVector, NormalizedLatex, TokenSequence, Vocabulary};
