//! Reverse image search over tiled satellite imagery.
//!
//! Tiles are fetched from a WMTS-style endpoint ([`ingest`]), reduced to
//! fixed-width embeddings ([`featurizer`]), persisted alongside their tile
//! coordinates ([`store`]), indexed in a forest of random-hyperplane trees
//! ([`ann`]) and served over HTTP ([`service`]) for a search-then-refine
//! workflow.

pub mod ann;
mod embedding;
mod error;
pub mod featurizer;
pub mod ingest;
pub mod retry;
pub mod rng;
pub mod service;
pub mod store;

pub use embedding::{Embedding, EmbeddingMatrix, DEFAULT_DIMENSION};
pub use error::{Error, Result};
