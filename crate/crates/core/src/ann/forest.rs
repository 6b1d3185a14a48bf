use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{self, inv_norm, PreparedQuery};
use super::{ItemId, Metric};
use crate::rng::{self, PortableRng};
use crate::{Embedding, EmbeddingMatrix, Error, Result, DEFAULT_DIMENSION};

pub const DEFAULT_N_TREES: usize = 50;
pub const DEFAULT_LEAF_CAPACITY: usize = 16;
/// Floor of the default search budget.
pub const MIN_SEARCH_BUDGET: usize = 2_000;

/// Hyperplane draws attempted before falling back to alternating assignment.
const SPLIT_ATTEMPTS: usize = 3;

/// `max(k * n_trees, 2000)`.
pub fn default_search_budget(k: usize, n_trees: usize) -> usize {
    k.saturating_mul(n_trees).max(MIN_SEARCH_BUDGET)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub dimension: usize,
    pub metric: Metric,
    pub n_trees: usize,
    pub leaf_capacity: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            dimension: DEFAULT_DIMENSION,
            metric: Metric::Angular,
            n_trees: DEFAULT_N_TREES,
            leaf_capacity: DEFAULT_LEAF_CAPACITY,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        if self.leaf_capacity == 0 {
            return Err(Error::invalid("leaf_capacity must be at least 1"));
        }
        Ok(())
    }
}

/// One ranked search hit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item_id: ItemId,
    pub distance: f64,
}

/// Query parameters.
///
/// `queries[0]` is normally the single (possibly pre-aggregated) query
/// embedding. Any further embeddings join the traversal and each candidate
/// is then ranked by its minimum distance over all of them.
#[derive(Clone, Debug)]
pub struct QuerySpec {
    pub queries: Vec<Embedding>,
    pub k: usize,
    pub search_budget: usize,
}

impl QuerySpec {
    /// Single-query spec with the default budget for a forest of `n_trees`.
    pub fn new(query: Embedding, k: usize, n_trees: usize) -> Self {
        QuerySpec {
            queries: vec![query],
            k,
            search_budget: default_search_budget(k, n_trees),
        }
    }

    pub fn with_budget(mut self, search_budget: usize) -> Self {
        self.search_budget = search_budget;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Node {
    /// `normal` indexes a `dimension`-wide row of [`Tree::normals`].
    Split {
        normal: u32,
        offset: f32,
        left: u32,
        right: u32,
    },
    /// `start..start + len` of [`Tree::leaf_items`].
    Leaf { start: u32, len: u32 },
}

/// A single tree, flattened. Node 0 is the root and every child id is
/// larger than its parent's.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tree {
    pub nodes: Vec<Node>,
    pub normals: Vec<f32>,
    pub leaf_items: Vec<u32>,
}

impl Tree {
    pub fn normal(&self, idx: u32, dimension: usize) -> &[f32] {
        let start = idx as usize * dimension;
        &self.normals[start..start + dimension]
    }

    pub fn leaf(&self, start: u32, len: u32) -> &[u32] {
        &self.leaf_items[start as usize..(start + len) as usize]
    }

    /// Re-lays out normals and leaf buckets in node order, the order the
    /// index file stores them in, so a loaded tree equals the built one.
    fn into_node_order(self, dimension: usize) -> Tree {
        let mut out = Tree {
            nodes: Vec::with_capacity(self.nodes.len()),
            normals: Vec::with_capacity(self.normals.len()),
            leaf_items: Vec::with_capacity(self.leaf_items.len()),
        };
        for node in &self.nodes {
            out.nodes.push(match *node {
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let idx = (out.normals.len() / dimension) as u32;
                    out.normals
                        .extend_from_slice(self.normal(normal, dimension));
                    Node::Split {
                        normal: idx,
                        offset,
                        left,
                        right,
                    }
                }
                Node::Leaf { start, len } => {
                    let new_start = out.leaf_items.len() as u32;
                    out.leaf_items.extend_from_slice(self.leaf(start, len));
                    Node::Leaf {
                        start: new_start,
                        len,
                    }
                }
            });
        }
        out
    }
}

/// An immutable forest of hyperplane trees over a dense item matrix.
#[derive(Clone, Debug)]
pub struct AnnForest {
    pub(crate) params: ForestParams,
    pub(crate) items: EmbeddingMatrix,
    pub(crate) inv_norms: Vec<f64>,
    pub(crate) trees: Vec<Tree>,
}

/// Builds a forest over `items`, which must all have `params.dimension`
/// components.
pub fn build_forest(items: &[Embedding], params: ForestParams) -> Result<AnnForest> {
    params.validate()?;
    let matrix = EmbeddingMatrix::from_embeddings(params.dimension, items)?;
    AnnForest::build(matrix, params)
}

impl AnnForest {
    /// Builds from a packed matrix. Trees are built in parallel, each from its
    /// own RNG stream `(seed, tree index)`, so the result does not depend on
    /// scheduling.
    pub fn build(items: EmbeddingMatrix, params: ForestParams) -> Result<AnnForest> {
        params.validate()?;
        if items.dimension() != params.dimension {
            return Err(Error::invalid(format!(
                "items have dimension {}, index expects {}",
                items.dimension(),
                params.dimension
            )));
        }
        if items.len() > u32::MAX as usize {
            return Err(Error::invalid("too many items for one index"));
        }
        let inv_norms: Vec<f64> = items.rows().map(inv_norm).collect();
        if params.metric == Metric::Angular {
            if let Some(i) = inv_norms.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "item {i} is the zero vector under the angular metric"
                )));
            }
        }
        let trees = {
            let ctx = BuildContext {
                items: &items,
                inv_norms: &inv_norms,
                params: &params,
            };
            (0..params.n_trees)
                .into_par_iter()
                .map(|t| ctx.build_tree(rng::stream(params.seed, t as u64)))
                .collect()
        };
        Ok(AnnForest {
            params,
            items,
            inv_norms,
            trees,
        })
    }

    pub(crate) fn from_parts(
        params: ForestParams,
        items: EmbeddingMatrix,
        trees: Vec<Tree>,
    ) -> AnnForest {
        let inv_norms = items.rows().map(inv_norm).collect();
        AnnForest {
            params,
            items,
            inv_norms,
            trees,
        }
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn dimension(&self) -> usize {
        self.params.dimension
    }

    pub fn metric(&self) -> Metric {
        self.params.metric
    }

    pub fn n_trees(&self) -> usize {
        self.params.n_trees
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &EmbeddingMatrix {
        &self.items
    }

    pub fn item(&self, id: ItemId) -> Option<Embedding> {
        ((id as usize) < self.len()).then(|| self.items.embedding(id as usize))
    }

    /// Leaf buckets of `tree`, in node order.
    pub fn leaves(&self, tree: usize) -> Vec<&[u32]> {
        let tree = &self.trees[tree];
        tree.nodes
            .iter()
            .filter_map(|n| match *n {
                Node::Leaf { start, len } => Some(tree.leaf(start, len)),
                Node::Split { .. } => None,
            })
            .collect()
    }

    /// Total number of nodes in `tree`.
    pub fn node_count(&self, tree: usize) -> usize {
        self.trees[tree].nodes.len()
    }

    /// Approximate k nearest neighbours, ascending by distance with ties
    /// broken by item id.
    pub fn query(&self, spec: &QuerySpec) -> Result<Vec<Neighbor>> {
        let prepared = self.prepare(spec)?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let candidates = self.collect_candidates(&prepared, spec.search_budget);
        let metric = self.metric();
        let mut ranked: Vec<Neighbor> = candidates
            .into_iter()
            .map(|id| {
                let row = self.items.row(id as usize);
                let inv = self.inv_norms[id as usize];
                let d = prepared
                    .iter()
                    .map(|q| q.distance_to(row, inv, metric))
                    .fold(f64::INFINITY, f64::min);
                Neighbor {
                    item_id: ItemId::from(id),
                    distance: d,
                }
            })
            .collect();
        let k = spec.k.min(ranked.len());
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k, distance::compare_neighbors);
            ranked.truncate(k);
        }
        distance::sort_neighbors(&mut ranked);
        Ok(ranked)
    }

    /// Candidate ids in the order the traversal discovers them.
    pub fn candidates(&self, spec: &QuerySpec) -> Result<Vec<ItemId>> {
        let prepared = self.prepare(spec)?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .collect_candidates(&prepared, spec.search_budget)
            .into_iter()
            .map(ItemId::from)
            .collect())
    }

    /// Exact k nearest neighbours over the indexed items.
    pub fn exact(&self, query: &Embedding, k: usize) -> Result<Vec<Neighbor>> {
        let spec = QuerySpec {
            queries: vec![query.clone()],
            k,
            search_budget: k,
        };
        let prepared = self.prepare(&spec)?;
        let q = &prepared[0];
        let metric = self.metric();
        let mut all: Vec<Neighbor> = self
            .items
            .rows()
            .zip(&self.inv_norms)
            .enumerate()
            .map(|(i, (row, &inv))| Neighbor {
                item_id: i as ItemId,
                distance: q.distance_to(row, inv, metric),
            })
            .collect();
        distance::sort_neighbors(&mut all);
        all.truncate(k);
        Ok(all)
    }

    fn prepare<'a>(&self, spec: &'a QuerySpec) -> Result<Vec<PreparedQuery<'a>>> {
        if spec.queries.is_empty() {
            return Err(Error::invalid("query spec has no query embeddings"));
        }
        if spec.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        // A budget covering every item is always enough, even when k exceeds
        // the item count.
        if spec.search_budget < spec.k.min(self.len()) || spec.search_budget == 0 {
            return Err(Error::invalid(format!(
                "search_budget {} is smaller than k {}",
                spec.search_budget,
                spec.k.min(self.len())
            )));
        }
        spec.queries
            .iter()
            .map(|q| {
                if q.dimension() != self.dimension() {
                    return Err(Error::invalid(format!(
                        "query has dimension {}, index has {}",
                        q.dimension(),
                        self.dimension()
                    )));
                }
                PreparedQuery::new(q.as_slice(), self.metric())
            })
            .collect()
    }

    fn collect_candidates(&self, queries: &[PreparedQuery<'_>], budget: usize) -> Vec<u32> {
        let dim = self.dimension();
        let metric = self.metric();
        let mut seen = vec![false; self.len()];
        let mut out = Vec::with_capacity(budget.min(self.len()));
        let mut heap = BinaryHeap::with_capacity(self.trees.len() * queries.len() * 4);
        for query in 0..queries.len() {
            for tree in 0..self.trees.len() {
                heap.push(Frontier {
                    priority: f64::INFINITY,
                    tree: tree as u32,
                    node: 0,
                    query: query as u32,
                });
            }
        }
        while out.len() < budget {
            let Some(top) = heap.pop() else { break };
            let tree = &self.trees[top.tree as usize];
            match tree.nodes[top.node as usize] {
                Node::Leaf { start, len } => {
                    for &id in tree.leaf(start, len) {
                        let slot = &mut seen[id as usize];
                        if !*slot {
                            *slot = true;
                            out.push(id);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = queries[top.query as usize].margin(
                        tree.normal(normal, dim),
                        offset,
                        metric,
                    );
                    heap.push(Frontier {
                        priority: top.priority.min(margin),
                        node: right,
                        ..top
                    });
                    heap.push(Frontier {
                        priority: top.priority.min(-margin),
                        node: left,
                        ..top
                    });
                }
            }
        }
        out
    }
}

/// Frontier entry. Highest priority pops first; equal priorities pop in
/// ascending (tree, node, query) order so traversal is fully deterministic.
#[derive(Clone, Copy, Debug)]
struct Frontier {
    priority: f64,
    tree: u32,
    node: u32,
    query: u32,
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
            .then_with(|| other.query.cmp(&self.query))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

struct BuildContext<'a> {
    items: &'a EmbeddingMatrix,
    inv_norms: &'a [f64],
    params: &'a ForestParams,
}

struct Hyperplane {
    normal: Vec<f32>,
    offset: f32,
}

impl BuildContext<'_> {
    fn build_tree(&self, mut rng: PortableRng) -> Tree {
        let mut tree = Tree {
            nodes: vec![Node::Leaf { start: 0, len: 0 }],
            normals: Vec::new(),
            leaf_items: Vec::with_capacity(self.items.len()),
        };
        let mut pending: Vec<(usize, Vec<u32>)> = vec![(0, (0..self.items.len() as u32).collect())];
        while let Some((slot, ids)) = pending.pop() {
            if ids.len() <= self.params.leaf_capacity {
                tree.nodes[slot] = Node::Leaf {
                    start: tree.leaf_items.len() as u32,
                    len: ids.len() as u32,
                };
                tree.leaf_items.extend_from_slice(&ids);
                continue;
            }
            let (plane, left, right) = self.split(&ids, &mut rng);
            let normal = (tree.normals.len() / self.params.dimension) as u32;
            tree.normals.extend_from_slice(&plane.normal);
            let left_slot = tree.nodes.len();
            let right_slot = left_slot + 1;
            tree.nodes.push(Node::Leaf { start: 0, len: 0 });
            tree.nodes.push(Node::Leaf { start: 0, len: 0 });
            tree.nodes[slot] = Node::Split {
                normal,
                offset: plane.offset,
                left: left_slot as u32,
                right: right_slot as u32,
            };
            pending.push((right_slot, right));
            pending.push((left_slot, left));
        }
        tree.into_node_order(self.params.dimension)
    }

    /// Splits `ids` (more than `leaf_capacity`, so at least two) into two
    /// non-empty halves.
    fn split(&self, ids: &[u32], rng: &mut PortableRng) -> (Hyperplane, Vec<u32>, Vec<u32>) {
        for _ in 0..SPLIT_ATTEMPTS {
            let i = rng::uniform_index(rng, ids.len());
            let mut j = rng::uniform_index(rng, ids.len() - 1);
            if j >= i {
                j += 1;
            }
            let plane = self.hyperplane(ids[i], ids[j]);
            let (left, right): (Vec<u32>, Vec<u32>) =
                ids.iter().partition(|&&id| self.margin(&plane, id) <= 0.0);
            if !left.is_empty() && !right.is_empty() {
                return (plane, left, right);
            }
        }
        // Duplicate-heavy sets: no hyperplane separates them. A zero normal
        // gives every query a zero margin here, so both halves are explored
        // with equal priority.
        let plane = Hyperplane {
            normal: vec![0.0; self.params.dimension],
            offset: 0.0,
        };
        let left = ids.iter().copied().step_by(2).collect();
        let right = ids.iter().copied().skip(1).step_by(2).collect();
        (plane, left, right)
    }

    fn hyperplane(&self, a: u32, b: u32) -> Hyperplane {
        let (pa, pb) = (self.items.row(a as usize), self.items.row(b as usize));
        match self.params.metric {
            Metric::Angular => {
                let (ia, ib) = (self.inv_norms[a as usize], self.inv_norms[b as usize]);
                let normal: Vec<f64> = pa
                    .iter()
                    .zip(pb)
                    .map(|(&x, &y)| f64::from(x) * ia - f64::from(y) * ib)
                    .collect();
                Hyperplane {
                    normal: unit(&normal),
                    offset: 0.0,
                }
            }
            Metric::Euclidean => {
                let diff: Vec<f64> = pa
                    .iter()
                    .zip(pb)
                    .map(|(&x, &y)| f64::from(x) - f64::from(y))
                    .collect();
                let normal = unit(&diff);
                let offset = normal
                    .iter()
                    .zip(pa.iter().zip(pb))
                    .map(|(&n, (&x, &y))| f64::from(n) * (f64::from(x) + f64::from(y)) * 0.5)
                    .sum::<f64>() as f32;
                Hyperplane { normal, offset }
            }
        }
    }

    fn margin(&self, plane: &Hyperplane, id: u32) -> f64 {
        let d = distance::dot(&plane.normal, self.items.row(id as usize));
        match self.params.metric {
            Metric::Angular => d * self.inv_norms[id as usize] - f64::from(plane.offset),
            Metric::Euclidean => d - f64::from(plane.offset),
        }
    }
}

/// `v` scaled to unit length, so margins are true distances to the plane
/// and comparable across nodes and trees. Zero stays zero.
fn unit(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    v.iter().map(|x| (x * scale) as f32).collect()
}
