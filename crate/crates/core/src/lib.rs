//! plmix-core: a synthetic-language laboratory for data-efficient
//! cross-lingual speech-synthesis adaptation.
//!
//! The crate builds everything from scratch at desk scale: a small dense
//! tensor core with reverse-mode gradients, deterministic toy-language
//! corpora with simulated multi-layer SSL features, a phoneme/representation
//! dual-encoder synthesis model, confidence-scored pseudo-labeling, the
//! mixing/filtering strategy family, the three-stage adaptation pipeline,
//! and a benchmark harness that turns the comparison grids into measurable
//! trends.

pub mod container;
pub mod corpus;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod pseudolabel;
pub mod seeds;
pub mod strategy;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{softmax, Tensor2};
