//! View-aware part embeddings for re-identification.
//!
//! Feature maps are pooled into one global vector plus four view-aligned
//! local vectors (front, back, side, top) using soft view masks. Two images
//! are compared with a fused distance: the global Euclidean distance plus a
//! local distance whose per-view terms are weighted by how visible each view
//! is in *both* images.
//!
//! The crate also carries the training losses with analytic gradients, a
//! desk-scale trainer, an analytic synthetic dataset, a retrieval evaluator
//! (CMC@k, mAP) and the on-disk container formats.

pub mod distance;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod pooling;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_pair, DatasetManifest, DistanceMatrix, FeatureMap, ImageRecord, Split, View,
    ViewEmbedding, ViewMaskSet, NUM_VIEWS,
};
