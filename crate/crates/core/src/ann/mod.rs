//! Approximate nearest neighbor search with a forest of random-hyperplane
//! binary trees.
//!
//! Every tree recursively halves its point set with a hyperplane drawn
//! between two sampled points until a set fits in a leaf. A query descends
//! all trees at once through one best-first frontier ordered by the margin
//! to each hyperplane, gathers at least `search_budget` candidate ids and
//! re-ranks them exactly.
//!
//! The on-disk layout lives in [`format`].

mod distance;
mod eval;
mod forest;
pub mod format;

pub use distance::{brute_force, distance, Metric};
pub use eval::{evaluate, percentile, EvalReport};
pub use forest::{
    build_forest, default_search_budget, AnnForest, ForestParams, Neighbor, QuerySpec,
    DEFAULT_LEAF_CAPACITY, DEFAULT_N_TREES, MIN_SEARCH_BUDGET,
};
pub use format::{load_forest, save_forest};

/// Dense item identifier; item `i` is row `i` of the indexed matrix.
pub type ItemId = u64;
