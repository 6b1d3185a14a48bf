#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use chrono::NaiveDate;
use tilesearch::store::{EmbeddingStore, TileKey};
use tilesearch::{rng, Embedding};

pub const BIN: &str = env!("CARGO_BIN_EXE_tilesearch");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// `n` i.i.d. standard Gaussian points.
pub fn gaussian_items(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut r = rng::stream(seed, 0x636c_6920);
    (0..n)
        .map(|_| Embedding::new((0..dim).map(|_| rng::gaussian(&mut r) as f32).collect()).unwrap())
        .collect()
}

/// `n` points uniform in the unit cube `[0, 1)^dim`.
pub fn uniform_items(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut r = rng::stream(seed, 0x756e_6966);
    (0..n)
        .map(|_| Embedding::new((0..dim).map(|_| rng::unit_f64(&mut r) as f32).collect()).unwrap())
        .collect()
}

/// Writes `items` into a new store; item `i` sits at row i / 512, col i % 512
/// of matrix 8.
pub fn write_store(dir: &Path, items: &[Embedding]) -> EmbeddingStore {
    let dim = items.first().map_or(128, |e| e.dimension());
    let mut store = EmbeddingStore::create(
        dir,
        dim,
        "http://tiles.test/{layer}/{date}/{matrix}/{row}/{col}.png",
    )
    .unwrap();
    let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    store
        .insert_batch(items.iter().enumerate().map(|(i, e)| {
            (
                TileKey::new("L", date, 8, i as u32 / 512, i as u32 % 512),
                e.clone(),
            )
        }))
        .unwrap();
    store
}

/// A running `tilesearch serve`; killed on drop.
pub struct Served {
    pub child: Child,
    pub base_url: String,
}

impl Served {
    pub fn start(args: &[&str]) -> Result<Served, String> {
        let mut child = Command::new(BIN)
            .arg("serve")
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        match line.trim().strip_prefix("listening on ") {
            Some(url) => Ok(Served {
                child,
                base_url: url.to_string(),
            }),
            None => {
                let out = child.wait_with_output().map_err(|e| e.to_string())?;
                Err(format!(
                    "serve exited with {:?}: {}",
                    out.status.code(),
                    String::from_utf8_lossy(&out.stderr)
                ))
            }
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Naive exact k-NN straight from the metric definitions, sharing no code
/// with the library: euclidean = |a - b|, angular = sqrt(2 - 2 cos).
pub fn oracle_knn(items: &[Embedding], q: &Embedding, k: usize, angular: bool) -> Vec<(u64, f64)> {
    let qv: Vec<f64> = q.as_slice().iter().map(|&v| f64::from(v)).collect();
    let qn = qv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(u64, f64)> = items
        .iter()
        .enumerate()
        .map(|(id, item)| {
            let iv: Vec<f64> = item.as_slice().iter().map(|&v| f64::from(v)).collect();
            let d = if angular {
                let n = iv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = qv.iter().zip(&iv).map(|(a, b)| a * b).sum::<f64>() / (qn * n);
                (2.0 - 2.0 * cos).max(0.0).sqrt()
            } else {
                qv.iter()
                    .zip(&iv)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            (id as u64, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Two Gaussian clusters of `per_cluster` points each; ids below
/// `per_cluster` belong to the first.
pub fn planted_clusters(per_cluster: usize, dim: usize, spread: f32, seed: u64) -> Vec<Embedding> {
    let centres = gaussian_items(2, dim, seed);
    gaussian_items(2 * per_cluster, dim, seed + 1)
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
