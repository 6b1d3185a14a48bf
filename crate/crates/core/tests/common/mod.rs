#![allow(dead_code)]

pub mod provider;

use tilesearch::ann::Metric;
use tilesearch::{rng, Embedding};

/// `n` i.i.d. standard Gaussian points.
pub fn gaussian_items(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut r = rng::stream(seed, 0x7465_7374);
    (0..n)
        .map(|_| Embedding::new((0..dim).map(|_| rng::gaussian(&mut r) as f32).collect()).unwrap())
        .collect()
}

/// Naive exact k-NN written from the metric definitions, independent of the
/// library's distance code: euclidean = |a - b|, angular = sqrt(2 - 2 cos).
pub fn oracle_knn(items: &[Embedding], q: &Embedding, k: usize, metric: Metric) -> Vec<(u64, f64)> {
    let qv: Vec<f64> = q.as_slice().iter().map(|&v| f64::from(v)).collect();
    let qn = qv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(u64, f64)> = items
        .iter()
        .enumerate()
        .map(|(id, item)| {
            let iv: Vec<f64> = item.as_slice().iter().map(|&v| f64::from(v)).collect();
            let d = match metric {
                Metric::Euclidean => qv
                    .iter()
                    .zip(&iv)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                Metric::Angular => {
                    let n = iv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = qv.iter().zip(&iv).map(|(a, b)| a * b).sum::<f64>() / (qn * n);
                    (2.0 - 2.0 * cos).max(0.0).sqrt()
                }
            };
            (id as u64, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Whether `got` matches the oracle ranking: equal length, distances within
/// `rel` relative error, and ids equal at every rank
/// except inside groups of oracle distances that tie within tolerance, where
/// the id sets must agree.
pub fn matches_oracle(got: &[(u64, f64)], oracle: &[(u64, f64)], rel: f64) -> Result<(), String> {
    if got.len() != oracle.len() {
        return Err(format!("length {} vs oracle {}", got.len(), oracle.len()));
    }
    // sqrt(2 - 2 cos) cancels catastrophically near zero: its absolute error
    // there is about sqrt(f64::EPSILON) ~ 1.5e-8, hence the absolute floor.
    let close = |a: f64, b: f64| (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-7;
    for (i, (g, o)) in got.iter().zip(oracle).enumerate() {
        if !close(g.1, o.1) {
            return Err(format!("rank {i}: distance {} vs oracle {}", g.1, o.1));
        }
    }
    let mut start = 0;
    while start < oracle.len() {
        let mut end = start + 1;
        while end < oracle.len() && close(oracle[end].1, oracle[start].1) {
            end += 1;
        }
        let mut a: Vec<u64> = got[start..end].iter().map(|n| n.0).collect();
        let mut b: Vec<u64> = oracle[start..end].iter().map(|n| n.0).collect();
        a.sort_unstable();
        b.sort_unstable();
        // A tie group cut by the k boundary may legitimately differ in ids.
        if a != b && end != oracle.len() {
            return Err(format!("ranks {start}..{end}: ids {a:?} vs oracle {b:?}"));
        }
        start = end;
    }
    Ok(())
}

/// Store + forest fixture: item `i` gets the key (layer "L", 2020-01-01,
/// matrix 8, row i / 512, col i % 512).
pub fn fixture(
    dir: &std::path::Path,
    items: &[Embedding],
    metric: Metric,
    n_trees: usize,
) -> (
    tilesearch::store::EmbeddingStore,
    tilesearch::ann::AnnForest,
) {
    let dim = items.first().map_or(4, |e| e.dimension());
    let mut store = tilesearch::store::EmbeddingStore::create(
        dir,
        dim,
        "http://tiles.test/{layer}/{date}/{matrix}/{row}/{col}.png",
    )
    .unwrap();
    let date = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let batch: Vec<_> = items
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (
                tilesearch::store::TileKey::new("L", date, 8, i as u32 / 512, i as u32 % 512),
                e.clone(),
            )
        })
        .collect();
    store.insert_batch(batch).unwrap();
    let params = tilesearch::ann::ForestParams {
        dimension: dim,
        metric,
        n_trees,
        leaf_capacity: 16,
        seed: 1,
    };
    let forest = tilesearch::ann::AnnForest::build(store.export_embeddings(), params).unwrap();
    (store, forest)
}

/// Two Gaussian clusters of `per_cluster` points each around random centres;
/// ids `0..per_cluster` are cluster A, the rest cluster B.
pub fn planted_clusters(per_cluster: usize, dim: usize, spread: f32, seed: u64) -> Vec<Embedding> {
    let centres = gaussian_items(2, dim, seed);
    let noise = gaussian_items(2 * per_cluster, dim, seed + 1);
    noise
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let c = &centres[i / per_cluster];
            Embedding::new(
                c.as_slice()
                    .iter()
                    .zip(n.as_slice())
                    .map(|(c, n)| c + spread * n)
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}
