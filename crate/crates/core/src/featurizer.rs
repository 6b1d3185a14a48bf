//! Tile image to embedding.
//!
//! Two providers exist. The reference featurizer is a fixed, deterministic
//! colour descriptor pushed through a seeded Gaussian random projection; it
//! needs no model and keeps the whole pipeline reproducible. The external
//! provider hands the tile to a model server over HTTP:
//!
//! ```text
//! POST {endpoint}/embed
//! Content-Type: image/png            (the normalized 256x256 tile)
//! 200 -> {"dimension": 128, "values": [f32; 128]}
//! ```
//!
//! Reference descriptor layout, version 1 (768 floats):
//!
//! | range      | content                                                      |
//! |------------|--------------------------------------------------------------|
//! | `0..96`    | R, G, B 32-bin histograms (bin = value >> 3), each summing to 1 |
//! | `96..288`  | 8x8 thumbnail, cell-major then channel: `96 + (y*8+x)*3 + c`, block mean / 255 |
//! | `288..768` | reserved, zero                                               |
//!
//! The projection is a 128 x 768 row-major matrix of standard normals drawn
//! from [`crate::rng::stream`]`(seed, PROJECTION_STREAM)` in row order.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::{Arc, Mutex, OnceLock};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::retry::{self, Attempt, RetryPolicy};
use crate::{rng, Embedding, Error, Result, DEFAULT_DIMENSION};

/// Edge length of a normalized tile.
pub const TILE_SIZE: u32 = 256;
pub const DESCRIPTOR_VERSION: u32 = 1;
pub const DESCRIPTOR_LEN: usize = 768;
pub const DEFAULT_REFERENCE_SEED: u64 = 0x7469_6c65_7365_6564;
/// ChaCha stream reserved for projection matrices.
pub const PROJECTION_STREAM: u64 = 0x7072_6f6a;

const HIST_BINS: usize = 32;
const THUMB: usize = 8;
const HIST_END: usize = 3 * HIST_BINS;
const THUMB_END: usize = HIST_END + THUMB * THUMB * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Jpeg,
    Png,
}

impl ImageFormat {
    pub fn mime(self) -> &'static str {
        match self {
            ImageFormat::Jpeg => "image/jpeg",
            ImageFormat::Png => "image/png",
        }
    }

    pub fn from_mime(mime: &str) -> Option<Self> {
        let essence = mime.split(';').next().unwrap_or("").trim();
        match essence.to_ascii_lowercase().as_str() {
            "image/jpeg" | "image/jpg" => Some(ImageFormat::Jpeg),
            "image/png" => Some(ImageFormat::Png),
            _ => None,
        }
    }

    /// Sniffs the format from magic bytes.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        match image::guess_format(bytes).ok()? {
            image::ImageFormat::Jpeg => Some(ImageFormat::Jpeg),
            image::ImageFormat::Png => Some(ImageFormat::Png),
            _ => None,
        }
    }

    fn to_image(self) -> image::ImageFormat {
        match self {
            ImageFormat::Jpeg => image::ImageFormat::Jpeg,
            ImageFormat::Png => image::ImageFormat::Png,
        }
    }
}

/// RGB tile, 8 bits per channel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl TileImage {
    fn validate(&self) -> Result<()> {
        if self.width != TILE_SIZE || self.height != TILE_SIZE {
            return Err(Error::invalid(format!(
                "tile is {}x{}, expected {TILE_SIZE}x{TILE_SIZE}",
                self.width, self.height
            )));
        }
        let expected = self.width as usize * self.height as usize * 3;
        if self.pixels.len() != expected {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} bytes, expected {expected}",
                self.pixels.len()
            )));
        }
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Cursor::new(Vec::new());
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("validated buffer")
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::InvalidImage(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Decodes `raw` as `format`, converts to RGB and resizes to 256x256
/// (bilinear) when needed.
pub fn normalize_tile(raw: &[u8], format: ImageFormat) -> Result<TileImage> {
    if format == ImageFormat::Jpeg && !has_jpeg_trailer(raw) {
        // The JPEG decoder pads truncated scans with grey instead of failing.
        return Err(Error::InvalidImage(
            "JPEG data is truncated (no end-of-image marker)".into(),
        ));
    }
    let decoded = image::load_from_memory_with_format(raw, format.to_image())
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    let mut rgb = decoded.into_rgb8();
    if rgb.width() != TILE_SIZE || rgb.height() != TILE_SIZE {
        rgb = image::imageops::resize(&rgb, TILE_SIZE, TILE_SIZE, FilterType::Triangle);
    }
    Ok(TileImage {
        width: TILE_SIZE,
        height: TILE_SIZE,
        pixels: rgb.into_raw(),
    })
}

/// Whether an end-of-image marker appears near the end of `raw`. Inside
/// entropy-coded data 0xFF is always byte-stuffed, so the pair only occurs
/// as a marker.
fn has_jpeg_trailer(raw: &[u8]) -> bool {
    let tail = &raw[raw.len().saturating_sub(1024)..];
    tail.windows(2).any(|w| w == [0xFF, 0xD9])
}

/// The 768-float raw reference descriptor.
pub fn raw_descriptor(img: &TileImage) -> Result<Vec<f32>> {
    img.validate()?;
    let mut hist = [[0u32; HIST_BINS]; 3];
    let cell = TILE_SIZE as usize / THUMB;
    let mut sums = vec![0u64; THUMB * THUMB * 3];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        let (y, x) = (i / TILE_SIZE as usize, i % TILE_SIZE as usize);
        let c = (y / cell) * THUMB + x / cell;
        for ch in 0..3 {
            hist[ch][(px[ch] >> 3) as usize] += 1;
            sums[c * 3 + ch] += u64::from(px[ch]);
        }
    }
    let n_pixels = (TILE_SIZE * TILE_SIZE) as f64;
    let per_cell = (cell * cell) as f64 * 255.0;
    let mut out = vec![0f32; DESCRIPTOR_LEN];
    for ch in 0..3 {
        for b in 0..HIST_BINS {
            out[ch * HIST_BINS + b] = (f64::from(hist[ch][b]) / n_pixels) as f32;
        }
    }
    for (j, s) in sums.iter().enumerate() {
        out[HIST_END + j] = (*s as f64 / per_cell) as f32;
    }
    debug_assert!(out[THUMB_END..].iter().all(|&v| v == 0.0));
    Ok(out)
}

/// Projection matrix for `seed`, generated on first use and cached.
pub fn projection(seed: u64) -> Arc<Vec<f32>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<Vec<f32>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(seed)
        .or_insert_with(|| {
            let mut rng = rng::stream(seed, PROJECTION_STREAM);
            Arc::new(
                (0..DEFAULT_DIMENSION * DESCRIPTOR_LEN)
                    .map(|_| rng::gaussian(&mut rng) as f32)
                    .collect(),
            )
        })
        .clone()
}

/// SHA-256 over the little-endian bytes of the projection matrix.
pub fn projection_fingerprint(seed: u64) -> String {
    let m = projection(seed);
    let mut h = Sha256::new();
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Deterministic 128-d unit embedding of `img`.
pub fn embed_reference(img: &TileImage, seed: u64) -> Result<Embedding> {
    let descriptor = raw_descriptor(img)?;
    let m = projection(seed);
    let projected: Vec<f64> = m
        .chunks_exact(DESCRIPTOR_LEN)
        .map(|row| {
            row.iter()
                .zip(&descriptor)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        })
        .collect();
    let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid("descriptor projects to the zero vector"));
    }
    Embedding::new(projected.iter().map(|v| (v / norm) as f32).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Reference,
    External,
}

/// Which featurizer to use and its expected output width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderDescriptor {
    pub kind: ProviderKind,
    /// Base URL of an external provider; `/embed` is appended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Projection seed of the reference featurizer.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

fn default_seed() -> u64 {
    DEFAULT_REFERENCE_SEED
}

impl Default for ProviderDescriptor {
    fn default() -> Self {
        ProviderDescriptor::reference(DEFAULT_REFERENCE_SEED)
    }
}

impl ProviderDescriptor {
    pub fn reference(seed: u64) -> Self {
        ProviderDescriptor {
            kind: ProviderKind::Reference,
            endpoint: None,
            dimension: DEFAULT_DIMENSION,
            seed,
        }
    }

    pub fn external(endpoint: impl Into<String>, dimension: usize) -> Self {
        ProviderDescriptor {
            kind: ProviderKind::External,
            endpoint: Some(endpoint.into()),
            dimension,
            seed: DEFAULT_REFERENCE_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::InvalidConfig(
                "provider dimension must be positive".into(),
            ));
        }
        match self.kind {
            ProviderKind::Reference if self.dimension != DEFAULT_DIMENSION => {
                Err(Error::InvalidConfig(format!(
                    "the reference featurizer produces {DEFAULT_DIMENSION} dimensions, not {}",
                    self.dimension
                )))
            }
            ProviderKind::External if self.endpoint.is_none() => Err(Error::InvalidConfig(
                "an external provider needs an endpoint".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Provenance recorded in a store manifest.
    pub fn stamp(&self) -> FeaturizerStamp {
        match self.kind {
            ProviderKind::Reference => FeaturizerStamp {
                kind: ProviderKind::Reference,
                descriptor_version: Some(DESCRIPTOR_VERSION),
                seed: Some(self.seed),
                projection_sha256: Some(projection_fingerprint(self.seed)),
                endpoint: None,
            },
            ProviderKind::External => FeaturizerStamp {
                kind: ProviderKind::External,
                descriptor_version: None,
                seed: None,
                projection_sha256: None,
                endpoint: self.endpoint.clone(),
            },
        }
    }
}

/// Featurizer provenance kept in the store manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerStamp {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl FeaturizerStamp {
    /// The descriptor that reproduces these embeddings at query time.
    pub fn descriptor(&self, dimension: usize) -> ProviderDescriptor {
        match self.kind {
            ProviderKind::Reference => {
                ProviderDescriptor::reference(self.seed.unwrap_or(DEFAULT_REFERENCE_SEED))
            }
            ProviderKind::External => ProviderDescriptor {
                kind: ProviderKind::External,
                endpoint: self.endpoint.clone(),
                dimension,
                seed: DEFAULT_REFERENCE_SEED,
            },
        }
    }
}

#[derive(Deserialize)]
struct ProviderResponse {
    dimension: usize,
    values: Vec<f64>,
}

/// A configured provider plus the HTTP client used for external calls.
#[derive(Clone, Debug)]
pub struct Featurizer {
    descriptor: ProviderDescriptor,
    client: reqwest::Client,
    retry: RetryPolicy,
}

impl Featurizer {
    pub fn new(descriptor: ProviderDescriptor) -> Result<Self> {
        Self::with_retry(descriptor, RetryPolicy::default())
    }

    pub fn with_retry(descriptor: ProviderDescriptor, retry: RetryPolicy) -> Result<Self> {
        descriptor.validate()?;
        Ok(Featurizer {
            descriptor,
            client: reqwest::Client::new(),
            retry,
        })
    }

    pub fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    pub fn dimension(&self) -> usize {
        self.descriptor.dimension
    }

    pub async fn embed(&self, img: &TileImage) -> Result<Embedding> {
        match self.descriptor.kind {
            ProviderKind::Reference => embed_reference(img, self.descriptor.seed),
            ProviderKind::External => {
                let png = img.encode_png()?;
                self.embed_external_encoded(png, ImageFormat::Png).await
            }
        }
    }

    /// Normalizes raw image bytes, then embeds them.
    pub async fn embed_bytes(&self, raw: &[u8], format: ImageFormat) -> Result<Embedding> {
        let img = normalize_tile(raw, format)?;
        self.embed(&img).await
    }

    async fn embed_external_encoded(
        &self,
        body: Vec<u8>,
        format: ImageFormat,
    ) -> Result<Embedding> {
        let endpoint = self
            .descriptor
            .endpoint
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("external provider has no endpoint".into()))?;
        let url = format!("{}/embed", endpoint.trim_end_matches('/'));
        let response = retry::run(&self.retry, || {
            let request = self
                .client
                .post(&url)
                .timeout(self.retry.timeout)
                .header(reqwest::header::CONTENT_TYPE, format.mime())
                .body(body.clone());
            let url = url.clone();
            async move {
                match request.send().await {
                    Err(e) => Attempt::Retry(Error::ProviderUnavailable(format!("{url}: {e}"))),
                    Ok(r) if r.status().is_server_error() => Attempt::Retry(
                        Error::ProviderUnavailable(format!("{url}: HTTP {}", r.status())),
                    ),
                    Ok(r) if !r.status().is_success() => Attempt::Fail(Error::ProviderUnavailable(
                        format!("{url}: HTTP {}", r.status()),
                    )),
                    Ok(r) => match r.bytes().await {
                        Ok(b) => Attempt::Done(b),
                        Err(e) => Attempt::Retry(Error::ProviderUnavailable(format!("{url}: {e}"))),
                    },
                }
            }
        })
        .await?;
        self.check_response(&response)
    }

    fn check_response(&self, body: &[u8]) -> Result<Embedding> {
        let want = self.descriptor.dimension;
        let parsed: ProviderResponse = serde_json::from_slice(body)
            .map_err(|e| Error::ProviderContractViolation(format!("malformed response: {e}")))?;
        if parsed.dimension != want || parsed.values.len() != want {
            return Err(Error::ProviderContractViolation(format!(
                "expected {want} values, provider declared {} and sent {}",
                parsed.dimension,
                parsed.values.len()
            )));
        }
        let values: Vec<f32> = parsed.values.iter().map(|&v| v as f32).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::ProviderContractViolation(format!(
                "value {i} is not a finite f32"
            )));
        }
        Embedding::new(values).map_err(|e| Error::ProviderContractViolation(e.to_string()))
    }
}

/// One-shot external embedding with the default retry policy.
pub async fn embed_external(img: &TileImage, provider: &ProviderDescriptor) -> Result<Embedding> {
    if provider.kind != ProviderKind::External {
        return Err(Error::invalid("embed_external needs an external provider"));
    }
    Featurizer::new(provider.clone())?.embed(img).await
}
