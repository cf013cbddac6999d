//! Bag-wise late-interaction retrieval for image/text pairs.
//!
//! Text tokens are grouped into lexicon-driven bags (words, entities,
//! phrases) whose embeddings are summed, then scored against image patches
//! with MaxSim. Modules:
//!
//! - [`embedding`]: matrices, projection heads, toy text mixer
//! - [`bagging`]: lexicon trie, longest-match segmentation, bag pooling
//! - [`similarity`]: global / token-wise / bag-wise kernels and heat maps
//! - [`contrastive`]: ITC and bag-wise contrastive losses, head training
//! - [`retrieval`]: index, two-stage search and Recall@K evaluation
//! - [`format`], [`synth`], [`bench`]: file formats, synthetic data, benchmark

pub mod bagging;
pub mod bench;
pub mod contrastive;
pub mod embedding;
pub mod error;
pub mod format;
pub mod retrieval;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
