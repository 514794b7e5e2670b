//! Recurrent language modelling with unsupervised phrase induction.
//!
//! A causal convolution assigns every token a syntactic height; heights
//! define soft induced phrases after each word, whose headword-weighted
//! embeddings a context-phrase alignment loss matches against the hidden
//! state of a lower LSTM layer. Everything runs on a small fp64 reverse-mode
//! autodiff tape ([`Tape`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod cpa;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod height;
pub mod induce;
pub mod induction;
pub mod lm;
pub mod model;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
pub use exec::Exec;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
