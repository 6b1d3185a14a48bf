use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::forest::{default_search_budget, AnnForest, QuerySpec};
use crate::rng;
use crate::{Error, Result};

/// RNG stream used to sample evaluation queries.
const EVAL_STREAM: u64 = 0x6576_616c;

/// Recall and latency of approximate queries against exact search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub k: usize,
    pub search_budget: usize,
    pub seed: u64,
    pub mean_recall: f64,
    pub min_recall: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Samples `n_queries` distinct stored items (all of them if there are
/// fewer) and uses each as a query, comparing the forest's top `k` with the
/// exact top `k`. Only the approximate query is timed.
pub fn evaluate(
    forest: &AnnForest,
    n_queries: usize,
    k: usize,
    search_budget: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    if k == 0 || n_queries == 0 {
        return Err(Error::invalid(
            "k and the number of queries must be positive",
        ));
    }
    let budget = search_budget.unwrap_or_else(|| default_search_budget(k, forest.n_trees()));
    let ids = sample_ids(forest.len(), n_queries, seed);
    let mut recalls = Vec::with_capacity(ids.len());
    let mut latencies = Vec::with_capacity(ids.len());
    for id in ids {
        let query = forest.item(id).expect("sampled id is in range");
        let exact = forest.exact(&query, k)?;
        let started = Instant::now();
        let approx =
            forest.query(&QuerySpec::new(query, k, forest.n_trees()).with_budget(budget))?;
        latencies.push(started.elapsed().as_secs_f64() * 1e3);
        let truth: HashSet<u64> = exact.iter().map(|n| n.item_id).collect();
        let hits = approx.iter().filter(|n| truth.contains(&n.item_id)).count();
        recalls.push(if truth.is_empty() {
            1.0
        } else {
            hits as f64 / truth.len() as f64
        });
    }
    latencies.sort_by(f64::total_cmp);
    let n = recalls.len();
    Ok(EvalReport {
        queries: n,
        k,
        search_budget: budget,
        seed,
        mean_recall: if n == 0 {
            1.0
        } else {
            recalls.iter().sum::<f64>() / n as f64
        },
        min_recall: recalls.iter().copied().fold(1.0, f64::min),
        p50_ms: percentile(&latencies, 0.50),
        p95_ms: percentile(&latencies, 0.95),
        max_ms: latencies.last().copied().unwrap_or(0.0),
    })
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Partial Fisher-Yates over `0..len`.
fn sample_ids(len: usize, n: usize, seed: u64) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..len as u64).collect();
    let n = n.min(len);
    let mut r = rng::stream(seed, EVAL_STREAM);
    for i in 0..n {
        let j = i + rng::uniform_index(&mut r, len - i);
        ids.swap(i, j);
    }
    ids.truncate(n);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{build_forest, ForestParams};
    use crate::Embedding;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn samples_are_distinct_and_reproducible() {
        let a = sample_ids(100, 30, 1);
        assert_eq!(a, sample_ids(100, 30, 1));
        assert_ne!(a, sample_ids(100, 30, 2));
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 30);
        assert_eq!(sample_ids(5, 30, 1).len(), 5);
    }

    #[test]
    fn full_budget_gives_perfect_recall() {
        let mut r = rng::stream(3, 0);
        let items: Vec<Embedding> = (0..300)
            .map(|_| {
                Embedding::new((0..8).map(|_| rng::gaussian(&mut r) as f32).collect()).unwrap()
            })
            .collect();
        let params = ForestParams {
            dimension: 8,
            n_trees: 4,
            leaf_capacity: 8,
            ..Default::default()
        };
        let forest = build_forest(&items, params).unwrap();
        let report = evaluate(&forest, 25, 10, Some(300), 0).unwrap();
        assert_eq!(report.queries, 25);
        assert_eq!(report.mean_recall, 1.0);
        assert_eq!(report.min_recall, 1.0);
    }
}
