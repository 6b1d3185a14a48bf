//! Binary index file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          4 bytes   "TSF1"
//! version        u32       1
//! dimension      u32
//! metric         u8        0 = angular, 1 = euclidean
//! n_trees        u32
//! leaf_capacity  u32
//! seed           u64
//! n_items        u64
//! items          n_items x dimension x f32, row-major
//! per tree:
//!   node_count   u64
//!   nodes        node_count tagged records, node 0 is the root
//!     tag u8 = 0 (split): dimension x f32 normal, f32 offset, u64 left, u64 right
//!     tag u8 = 1 (leaf):  u32 count, count x u64 item ids
//! ```
//!
//! Child ids index nodes of the same tree and are always greater than the
//! parent's id. Every tree's leaves hold each item id exactly once.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::forest::{AnnForest, ForestParams, Node, Tree};
use super::Metric;
use crate::{EmbeddingMatrix, Error, Result};

pub const MAGIC: [u8; 4] = *b"TSF1";
pub const VERSION: u32 = 1;

const TAG_SPLIT: u8 = 0;
const TAG_LEAF: u8 = 1;

/// Writes `forest` to `path`. The file is written next to the target and
/// renamed into place.
pub fn save_forest(forest: &AnnForest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    write_forest(forest, &mut out).map_err(|e| Error::io(&tmp, e))?;
    let file = out
        .into_inner()
        .map_err(|e| Error::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<AnnForest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Serializes into any writer; `save_forest` is this plus the atomic rename.
pub fn write_forest(forest: &AnnForest, out: &mut impl Write) -> std::io::Result<()> {
    let p = forest.params();
    let dim = p.dimension;
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&[p.metric.to_wire()])?;
    out.write_all(&(p.n_trees as u32).to_le_bytes())?;
    out.write_all(&(p.leaf_capacity as u32).to_le_bytes())?;
    out.write_all(&p.seed.to_le_bytes())?;
    out.write_all(&(forest.len() as u64).to_le_bytes())?;
    for v in forest.items.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    for tree in &forest.trees {
        out.write_all(&(tree.nodes.len() as u64).to_le_bytes())?;
        for node in &tree.nodes {
            match *node {
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    out.write_all(&[TAG_SPLIT])?;
                    for v in tree.normal(normal, dim) {
                        out.write_all(&v.to_le_bytes())?;
                    }
                    out.write_all(&offset.to_le_bytes())?;
                    out.write_all(&u64::from(left).to_le_bytes())?;
                    out.write_all(&u64::from(right).to_le_bytes())?;
                }
                Node::Leaf { start, len } => {
                    out.write_all(&[TAG_LEAF])?;
                    out.write_all(&len.to_le_bytes())?;
                    for &id in tree.leaf(start, len) {
                        out.write_all(&u64::from(id).to_le_bytes())?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// In-memory serialization.
pub fn encode(forest: &AnnForest) -> Vec<u8> {
    let mut buf = Vec::new();
    write_forest(forest, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode(bytes: &[u8]) -> Result<AnnForest> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take("magic", 4)?;
    if magic != MAGIC {
        return Err(corrupt(
            "magic",
            format!("expected \"TSF1\", found {magic:02x?}"),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(corrupt("version", format!("unsupported version {version}")));
    }
    let dimension = r.u32("dimension")? as usize;
    if dimension == 0 {
        return Err(corrupt("dimension", "dimension is zero".into()));
    }
    let metric_byte = r.u8("metric")?;
    let metric = Metric::from_wire(metric_byte)
        .ok_or_else(|| corrupt("metric", format!("unknown metric byte {metric_byte}")))?;
    let n_trees = r.u32("n_trees")? as usize;
    if n_trees == 0 {
        return Err(corrupt("n_trees", "index has no trees".into()));
    }
    let leaf_capacity = r.u32("leaf_capacity")? as usize;
    if leaf_capacity == 0 {
        return Err(corrupt("leaf_capacity", "leaf capacity is zero".into()));
    }
    let seed = r.u64("seed")?;
    let n_items = r.u64("n_items")?;
    if n_items > u64::from(u32::MAX) {
        return Err(corrupt(
            "n_items",
            format!("{n_items} items is out of range"),
        ));
    }
    let n_items = n_items as usize;
    let item_bytes = n_items
        .checked_mul(dimension)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("items", "item block size overflows".into()))?;
    let data = r
        .take("items", item_bytes)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    let items =
        EmbeddingMatrix::new(dimension, data).map_err(|e| corrupt("items", e.to_string()))?;

    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        trees.push(read_tree(&mut r, dimension, n_items)?);
    }
    if r.pos != bytes.len() {
        return Err(corrupt(
            "trailer",
            format!(
                "{} unexpected bytes after the last tree",
                bytes.len() - r.pos
            ),
        ));
    }
    let params = ForestParams {
        dimension,
        metric,
        n_trees,
        leaf_capacity,
        seed,
    };
    Ok(AnnForest::from_parts(params, items, trees))
}

fn read_tree(r: &mut Reader<'_>, dimension: usize, n_items: usize) -> Result<Tree> {
    let node_count = r.u64("node_count")?;
    // Every node takes at least 5 bytes, which bounds a sane count.
    if node_count == 0 || node_count > (r.remaining() / 5) as u64 {
        return Err(corrupt(
            "node_count",
            format!("implausible node count {node_count}"),
        ));
    }
    let node_count = node_count as usize;
    let mut tree = Tree {
        nodes: Vec::with_capacity(node_count),
        normals: Vec::new(),
        leaf_items: Vec::new(),
    };
    let mut referenced = vec![false; node_count];
    let mut placed = vec![false; n_items];
    for idx in 0..node_count {
        match r.u8("node_tag")? {
            TAG_SPLIT => {
                let normal = (tree.normals.len() / dimension) as u32;
                for c in r.take("split_normal", dimension * 4)?.chunks_exact(4) {
                    tree.normals.push(f32::from_le_bytes(c.try_into().unwrap()));
                }
                let offset = f32::from_le_bytes(r.take("split_offset", 4)?.try_into().unwrap());
                let left = r.u64("split_left")?;
                let right = r.u64("split_right")?;
                for (field, child) in [("split_left", left), ("split_right", right)] {
                    if child <= idx as u64 || child >= node_count as u64 {
                        return Err(corrupt(field, format!("node {idx} has bad child {child}")));
                    }
                    if std::mem::replace(&mut referenced[child as usize], true) {
                        return Err(corrupt(field, format!("node {child} has two parents")));
                    }
                }
                tree.nodes.push(Node::Split {
                    normal,
                    offset,
                    left: left as u32,
                    right: right as u32,
                });
            }
            TAG_LEAF => {
                let count = r.u32("leaf_count")?;
                let start = tree.leaf_items.len() as u32;
                for c in r.take("leaf_items", count as usize * 8)?.chunks_exact(8) {
                    let id = u64::from_le_bytes(c.try_into().unwrap());
                    if id >= n_items as u64 {
                        return Err(corrupt(
                            "leaf_items",
                            format!("item id {id} out of range for {n_items} items"),
                        ));
                    }
                    if std::mem::replace(&mut placed[id as usize], true) {
                        return Err(corrupt(
                            "leaf_items",
                            format!("item {id} appears in two leaves"),
                        ));
                    }
                    tree.leaf_items.push(id as u32);
                }
                tree.nodes.push(Node::Leaf { start, len: count });
            }
            tag => return Err(corrupt("node_tag", format!("unknown node tag {tag}"))),
        }
    }
    if let Some(orphan) = (1..node_count).find(|&i| !referenced[i]) {
        return Err(corrupt(
            "node_count",
            format!("node {orphan} is unreachable"),
        ));
    }
    if let Some(missing) = placed.iter().position(|&p| !p) {
        return Err(corrupt(
            "leaf_items",
            format!("item {missing} is in no leaf"),
        ));
    }
    Ok(tree)
}

fn corrupt(field: &'static str, detail: String) -> Error {
    Error::CorruptIndex { field, detail }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(corrupt(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.remaining()
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(field, 1)?[0])
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().unwrap()))
    }
}
