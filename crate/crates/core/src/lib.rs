//! Structured multi-modal tree embedding and alignment for image-sentence
//! retrieval.
//!
//! Region features and sentences are pooled into instance embeddings, parsed
//! by two fixed 7-node tree-LSTM encoders supervised with a shared referral
//! tree, fused, and trained with a joint ranking / node-classification /
//! KL-alignment objective.

pub mod autodiff;
pub mod corpus;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod params;
pub mod real;
pub mod referral;
pub mod registry;
pub mod treeenc;
pub mod vocab;

pub use error::{Error, Result};
pub use real::Real;
