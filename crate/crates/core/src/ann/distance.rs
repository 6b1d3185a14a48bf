use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::forest::Neighbor;
use crate::{Embedding, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `sqrt(2 - 2 cos(a, b))`, the chord length between unit directions.
    #[default]
    Angular,
    Euclidean,
}

impl Metric {
    pub(crate) fn to_wire(self) -> u8 {
        match self {
            Metric::Angular => 0,
            Metric::Euclidean => 1,
        }
    }

    pub(crate) fn from_wire(byte: u8) -> Option<Self> {
        match byte {
            0 => Some(Metric::Angular),
            1 => Some(Metric::Euclidean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Angular => "angular",
            Metric::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "angular" => Ok(Metric::Angular),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

/// Distance between two embeddings under `metric`.
///
/// Angular distance is computed as the Euclidean distance between the two
/// unit directions, which equals `sqrt(2 - 2 cos)` but is exactly zero for
/// identical inputs and needs no clamping.
pub fn distance(a: &Embedding, b: &Embedding, metric: Metric) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dimension(),
            b.dimension()
        )));
    }
    match metric {
        Metric::Euclidean => Ok(euclidean(a.as_slice(), b.as_slice())),
        Metric::Angular => {
            let (ia, ib) = (inv_norm(a.as_slice()), inv_norm(b.as_slice()));
            if !ia.is_finite() || !ib.is_finite() {
                return Err(Error::invalid(
                    "angular distance is undefined for the zero vector",
                ));
            }
            Ok(angular(a.as_slice(), ia, b.as_slice(), ib))
        }
    }
}

/// Exact k nearest neighbours of `q` by full scan, sorted by distance with
/// ties broken by ascending item id.
pub fn brute_force(
    items: &[Embedding],
    q: &Embedding,
    k: usize,
    metric: Metric,
) -> Result<Vec<Neighbor>> {
    let query = PreparedQuery::new(q.as_slice(), metric)?;
    for (i, item) in items.iter().enumerate() {
        if item.dimension() != q.dimension() {
            return Err(Error::invalid(format!(
                "item {i} has dimension {}, query has {}",
                item.dimension(),
                q.dimension()
            )));
        }
        if metric == Metric::Angular && item.is_zero() {
            return Err(Error::invalid(format!(
                "item {i} is the zero vector under the angular metric"
            )));
        }
    }
    let mut all: Vec<Neighbor> = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let row = item.as_slice();
            Neighbor {
                item_id: i as u64,
                distance: query.distance_to(row, inv_norm(row), metric),
            }
        })
        .collect();
    sort_neighbors(&mut all);
    all.truncate(k);
    Ok(all)
}

pub(crate) fn sort_neighbors(list: &mut [Neighbor]) {
    list.sort_by(compare_neighbors);
}

pub(crate) fn compare_neighbors(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.item_id.cmp(&b.item_id))
}

/// A query vector with its reciprocal norm cached.
pub(crate) struct PreparedQuery<'a> {
    pub values: &'a [f32],
    pub inv_norm: f64,
}

impl<'a> PreparedQuery<'a> {
    pub fn new(values: &'a [f32], metric: Metric) -> Result<Self> {
        let inv = inv_norm(values);
        if metric == Metric::Angular && !inv.is_finite() {
            return Err(Error::invalid(
                "query is the zero vector under the angular metric",
            ));
        }
        Ok(PreparedQuery {
            values,
            inv_norm: inv,
        })
    }

    #[inline]
    pub fn distance_to(&self, row: &[f32], row_inv_norm: f64, metric: Metric) -> f64 {
        match metric {
            Metric::Euclidean => euclidean(self.values, row),
            Metric::Angular => angular(self.values, self.inv_norm, row, row_inv_norm),
        }
    }

    /// Signed distance-like margin of this query to a hyperplane. Angular
    /// queries are measured in unit-direction space, matching how the
    /// hyperplanes were drawn.
    #[inline]
    pub fn margin(&self, normal: &[f32], offset: f32, metric: Metric) -> f64 {
        let d = dot(normal, self.values);
        match metric {
            Metric::Angular => d * self.inv_norm - f64::from(offset),
            Metric::Euclidean => d - f64::from(offset),
        }
    }
}

/// `1 / ||v||`; infinite for the zero vector.
#[inline]
pub(crate) fn inv_norm(v: &[f32]) -> f64 {
    1.0 / dot(v, v).sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[inline]
fn angular(a: &[f32], inv_a: f64, b: &[f32], inv_b: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) * inv_a - f64::from(y) * inv_b;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
