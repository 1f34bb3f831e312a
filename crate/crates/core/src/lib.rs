//! Clustering-reinforced prompt learning for unsupervised domain adaptation,
//! carried out entirely in embedding space.
//!
//! Learnable prompt tokens are pushed through a frozen text encoder and
//! trained against frozen visual embeddings with three terms: cross-entropy
//! on labeled source domains, soft cross-entropy on the target domain against
//! source-enhanced pseudo-labels, and an optimal-transport clustering loss
//! between the target text embeddings and the target visual embeddings.

pub mod bench;
pub mod blob;
pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod ot;
pub mod prompt;
pub mod pseudo_label;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
