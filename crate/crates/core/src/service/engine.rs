use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ann::{self, AnnForest, Metric, QuerySpec};
use crate::featurizer::{Featurizer, ImageFormat, ProviderDescriptor, ProviderKind};
use crate::store::{fill_template, validate_template, EmbeddingStore, TileRecord};
use crate::{Embedding, Error, Result};

pub const DEFAULT_K: usize = 20;
pub const MAX_K: usize = 1_000;

/// How several query embeddings are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Rank against the normalized centroid of the queries.
    #[default]
    Centroid,
    /// Rank each item by its smallest distance to any query.
    MinDistance,
}

/// One search or refinement request. Exactly one of `image`, `embedding`
/// and `selected_ids` must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    /// Raw JPEG or PNG bytes, base64 in JSON.
    #[serde(
        default,
        with = "base64_bytes",
        skip_serializing_if = "Option::is_none"
    )]
    pub image: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_ids: Option<Vec<u64>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude_ids: Vec<u64>,
    #[serde(default)]
    pub rank_mode: RankMode,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for SearchRequest {
    fn default() -> Self {
        SearchRequest {
            image: None,
            embedding: None,
            selected_ids: None,
            k: DEFAULT_K,
            exclude_ids: Vec::new(),
            rank_mode: RankMode::default(),
        }
    }
}

impl SearchRequest {
    pub fn by_embedding(values: Vec<f32>, k: usize) -> Self {
        SearchRequest {
            embedding: Some(values),
            k,
            ..Default::default()
        }
    }

    pub fn by_selection(ids: Vec<u64>, k: usize) -> Self {
        SearchRequest {
            selected_ids: Some(ids),
            k,
            ..Default::default()
        }
    }

    pub fn by_image(bytes: Vec<u8>, k: usize) -> Self {
        SearchRequest {
            image: Some(bytes),
            k,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let sources = usize::from(self.image.is_some())
            + usize::from(self.embedding.is_some())
            + usize::from(self.selected_ids.is_some());
        if sources != 1 {
            return Err(Error::invalid(format!(
                "exactly one of image, embedding, selected_ids is required ({sources} given)"
            )));
        }
        if self.k == 0 || self.k > MAX_K {
            return Err(Error::invalid(format!(
                "k must be in 1..={MAX_K}, got {}",
                self.k
            )));
        }
        if matches!(&self.selected_ids, Some(ids) if ids.is_empty()) {
            return Err(Error::invalid("selected_ids must not be empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub item_id: u64,
    pub distance: f64,
    pub url: String,
    pub layer: String,
    pub date: NaiveDate,
    pub tile_matrix: u32,
    pub row: u32,
    pub col: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
    pub query_id: String,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileMeta {
    #[serde(flatten)]
    pub record: TileRecord,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_items: usize,
    pub dimension: usize,
    pub metric: Metric,
    pub n_trees: usize,
    pub store_count: usize,
    pub store_dimension: usize,
    pub provider: ProviderKind,
    /// Set when the index and the store disagree on item count or dimension.
    pub count_mismatch: bool,
}

/// Whether a request is an initial search or a refinement round. Only
/// affects logging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Search,
    Refine,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Search => "search",
            Stage::Refine => "refine",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EngineOptions {
    pub search_budget: Option<usize>,
    pub url_template: Option<String>,
}

/// Immutable (forest, store, featurizer) snapshot answering requests.
#[derive(Debug)]
pub struct SearchEngine {
    forest: AnnForest,
    store: EmbeddingStore,
    featurizer: Featurizer,
    url_template: String,
    search_budget: Option<usize>,
}

/// Component-wise mean of `embeddings`, L2-normalized under the angular
/// metric.
pub fn aggregate_queries(embeddings: &[Embedding], metric: Metric) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("no embeddings to aggregate"))?;
    let dim = first.dimension();
    let mut sum = vec![0f64; dim];
    for (i, e) in embeddings.iter().enumerate() {
        if e.dimension() != dim {
            return Err(Error::invalid(format!(
                "embedding {i} has dimension {}, expected {dim}",
                e.dimension()
            )));
        }
        if metric == Metric::Angular && e.is_zero() {
            return Err(Error::invalid(format!("embedding {i} is the zero vector")));
        }
        for (s, &v) in sum.iter_mut().zip(e.as_slice()) {
            *s += f64::from(v);
        }
    }
    let n = embeddings.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    let values = match metric {
        Metric::Euclidean => mean.iter().map(|&v| v as f32).collect(),
        Metric::Angular => {
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let out: Vec<f32> = mean.iter().map(|&v| (v / norm) as f32).collect();
            if norm == 0.0 || out.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateQuery(
                    "the selected embeddings cancel out; their mean has no direction".into(),
                ));
            }
            out
        }
    };
    Embedding::new(values)
}

impl SearchEngine {
    pub fn new(
        forest: AnnForest,
        store: EmbeddingStore,
        featurizer: Featurizer,
        options: EngineOptions,
    ) -> Result<Self> {
        let url_template = options
            .url_template
            .unwrap_or_else(|| store.manifest().url_template.clone());
        validate_template(&url_template)?;
        if options.search_budget == Some(0) {
            return Err(Error::InvalidConfig(
                "search_budget must be positive".into(),
            ));
        }
        if forest.len() > store.len() {
            return Err(Error::InvalidConfig(format!(
                "index holds {} items but the store only {}",
                forest.len(),
                store.len()
            )));
        }
        Ok(SearchEngine {
            forest,
            store,
            featurizer,
            url_template,
            search_budget: options.search_budget,
        })
    }

    /// Loads the index and a read-only store snapshot. Without an explicit
    /// provider the featurizer recorded in the store manifest is used.
    pub fn load(
        index_path: impl AsRef<Path>,
        store_path: impl AsRef<Path>,
        provider: Option<ProviderDescriptor>,
        options: EngineOptions,
    ) -> Result<Self> {
        let forest = ann::load_forest(index_path)?;
        let store = EmbeddingStore::open_read_only(store_path)?;
        let provider = provider.unwrap_or_else(|| match &store.manifest().featurizer {
            Some(stamp) => stamp.descriptor(store.dimension()),
            None => ProviderDescriptor::default(),
        });
        let featurizer = Featurizer::new(provider)?;
        Self::new(forest, store, featurizer, options)
    }

    pub fn forest(&self) -> &AnnForest {
        &self.forest
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub async fn search(&self, req: &SearchRequest) -> Result<SearchResponse> {
        self.run(req, Stage::Search).await
    }

    /// Same results as [`SearchEngine::search`]; requires `selected_ids`.
    pub async fn refine(&self, req: &SearchRequest) -> Result<SearchResponse> {
        if req.selected_ids.is_none() {
            return Err(Error::invalid("refine requires selected_ids"));
        }
        self.run(req, Stage::Refine).await
    }

    pub async fn run(&self, req: &SearchRequest, stage: Stage) -> Result<SearchResponse> {
        let started = Instant::now();
        req.validate()?;
        let sources = self.query_embeddings(req).await?;
        let metric = self.forest.metric();
        let queries = match (req.rank_mode, sources.len()) {
            // Angular distance ignores scale, so one embedding is used as is.
            (_, 1) | (RankMode::MinDistance, _) => sources,
            (RankMode::Centroid, _) => vec![aggregate_queries(&sources, metric)?],
        };

        let selected = req.selected_ids.as_deref().unwrap_or(&[]);
        let excluded: HashSet<u64> = req.exclude_ids.iter().chain(selected).copied().collect();
        let mut results = Vec::new();
        if !self.forest.is_empty() {
            let wanted = req.k + selected.len() + req.exclude_ids.len();
            let budget = self
                .search_budget
                .unwrap_or_else(|| ann::default_search_budget(wanted, self.forest.n_trees()))
                .max(wanted);
            let spec = QuerySpec {
                queries,
                k: wanted,
                search_budget: budget,
            };
            for n in self.forest.query(&spec)? {
                if excluded.contains(&n.item_id) {
                    continue;
                }
                results.push(self.hit(n.item_id, n.distance)?);
                if results.len() == req.k {
                    break;
                }
            }
        } else {
            for q in &queries {
                if q.dimension() != self.forest.dimension() {
                    return Err(Error::invalid(format!(
                        "query has dimension {}, index has {}",
                        q.dimension(),
                        self.forest.dimension()
                    )));
                }
            }
        }

        let response = SearchResponse {
            results,
            query_id: uuid::Uuid::new_v4().to_string(),
            elapsed_ms: started.elapsed().as_millis() as u64,
        };
        tracing::info!(
            stage = stage.as_str(),
            query_id = %response.query_id,
            k = req.k,
            selected = selected.len(),
            excluded = req.exclude_ids.len(),
            returned = response.results.len(),
            elapsed_ms = response.elapsed_ms,
            "query"
        );
        Ok(response)
    }

    async fn query_embeddings(&self, req: &SearchRequest) -> Result<Vec<Embedding>> {
        if let Some(bytes) = &req.image {
            let format = ImageFormat::detect(bytes)
                .ok_or_else(|| Error::InvalidImage("not a JPEG or PNG image".into()))?;
            return Ok(vec![self.featurizer.embed_bytes(bytes, format).await?]);
        }
        if let Some(values) = &req.embedding {
            return Ok(vec![Embedding::new(values.clone())?]);
        }
        let ids = req.selected_ids.as_deref().unwrap_or(&[]);
        ids.iter().map(|&id| self.store.embedding(id)).collect()
    }

    fn hit(&self, item_id: u64, distance: f64) -> Result<SearchHit> {
        let record = self.store.record(item_id)?;
        Ok(SearchHit {
            item_id,
            distance,
            url: fill_template(&self.url_template, &record.key())?,
            layer: record.layer.clone(),
            date: record.date,
            tile_matrix: record.tile_matrix,
            row: record.row,
            col: record.col,
        })
    }

    pub fn tile_meta(&self, item_id: u64) -> Result<TileMeta> {
        let record = self.store.record(item_id)?.clone();
        let url = fill_template(&self.url_template, &record.key())?;
        Ok(TileMeta { record, url })
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            index_items: self.forest.len(),
            dimension: self.forest.dimension(),
            metric: self.forest.metric(),
            n_trees: self.forest.n_trees(),
            store_count: self.store.len(),
            store_dimension: self.store.dimension(),
            provider: self.featurizer.descriptor().kind,
            count_mismatch: self.forest.len() != self.store.len()
                || self.forest.dimension() != self.store.dimension(),
        }
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_str(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| {
                STANDARD
                    .decode(s.as_bytes())
                    .map_err(serde::de::Error::custom)
            })
            .transpose()
    }
}
