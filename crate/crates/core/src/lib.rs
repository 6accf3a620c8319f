//! Frame-semantic parsing with constituency path features.
//!
//! A graph convolutional network learns an encoding for every constituent
//! of a tree; summing encodings along tree paths gives each token a syntactic
//! feature relative to the root or to a predicate. Those features feed
//! BiLSTM backbones and three CRF-based heads: target identification, frame
//! identification and semantic role labeling.

pub mod autodiff;
pub mod check;
pub mod corpus;
pub mod crf;
pub mod evaluation;
pub mod gcn;
mod error;
pub mod layers;
pub mod model;
pub mod synth;
pub mod syntax;
pub mod trace;
pub mod training;

pub use error::{Error, Result};
