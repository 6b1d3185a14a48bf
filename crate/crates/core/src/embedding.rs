use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Width of the feature vectors produced by the featurizers.
pub const DEFAULT_DIMENSION: usize = 128;

/// A finite, non-empty feature vector.
///
/// The dimension is not fixed by the type; each consumer (index, store,
/// provider) checks it against its own configured width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding has no components"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "embedding component {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Returns a unit-length copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Embedding> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize the zero vector"));
        }
        Ok(Embedding(
            self.0
                .iter()
                .map(|&v| (f64::from(v) / norm) as f32)
                .collect(),
        ))
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Dense row-major matrix of embeddings, row `i` belonging to item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dimension: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dimension: usize, data: Vec<f32>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !data.len().is_multiple_of(dimension) {
            return Err(Error::invalid(format!(
                "buffer of {} floats is not a whole number of {dimension}-wide rows",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "row {} component {} is not finite",
                i / dimension,
                i % dimension
            )));
        }
        Ok(EmbeddingMatrix { dimension, data })
    }

    pub fn empty(dimension: usize) -> Self {
        EmbeddingMatrix {
            dimension,
            data: Vec::new(),
        }
    }

    /// Packs a list of embeddings, all of which must have `dimension` components.
    pub fn from_embeddings(dimension: usize, items: &[Embedding]) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut data = Vec::with_capacity(items.len() * dimension);
        for (i, e) in items.iter().enumerate() {
            if e.dimension() != dimension {
                return Err(Error::invalid(format!(
                    "item {i} has dimension {}, expected {dimension}",
                    e.dimension()
                )));
            }
            data.extend_from_slice(e.as_slice());
        }
        Ok(EmbeddingMatrix { dimension, data })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dimension)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding(self.row(i).to_vec())
    }

    pub fn to_embeddings(&self) -> Vec<Embedding> {
        self.rows().map(|r| Embedding(r.to_vec())).collect()
    }

    pub(crate) fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.dimension);
        self.data.extend_from_slice(row);
    }
}
