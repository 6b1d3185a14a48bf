//! Append-only embedding store.
//!
//! A store is a directory holding three files:
//!
//! * `embeddings.f32`: raw little-endian float32 rows, row-major, one row of
//!   `dimension` floats per item.
//! * `records.jsonl`: one JSON [`TileRecord`] per line, line `i` is item `i`.
//! * `manifest.json`: [`StoreManifest`], replaced atomically after every
//!   committed write.
//!
//! The manifest `count` is the commit point. Bytes or lines past it are the
//! remains of an interrupted write; readers ignore them and a writer truncates
//! them when it opens the store.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::featurizer::FeaturizerStamp;
use crate::{Embedding, EmbeddingMatrix, Error, Result};

pub const EMBEDDINGS_FILE: &str = "embeddings.f32";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Placeholders every URL template must contain.
pub const URL_PLACEHOLDERS: [&str; 5] = ["{layer}", "{date}", "{matrix}", "{row}", "{col}"];

/// Identity of a tile: imagery layer, day, tile-matrix level and grid cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub layer: String,
    pub date: NaiveDate,
    pub tile_matrix: u32,
    pub row: u32,
    pub col: u32,
}

impl TileKey {
    pub fn new(
        layer: impl Into<String>,
        date: NaiveDate,
        tile_matrix: u32,
        row: u32,
        col: u32,
    ) -> Self {
        TileKey {
            layer: layer.into(),
            date,
            tile_matrix,
            row,
            col,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub item_id: u64,
    pub layer: String,
    pub date: NaiveDate,
    pub tile_matrix: u32,
    pub row: u32,
    pub col: u32,
}

impl TileRecord {
    pub fn key(&self) -> TileKey {
        TileKey::new(
            self.layer.clone(),
            self.date,
            self.tile_matrix,
            self.row,
            self.col,
        )
    }

    fn from_key(item_id: u64, key: TileKey) -> Self {
        TileRecord {
            item_id,
            layer: key.layer,
            date: key.date,
            tile_matrix: key.tile_matrix,
            row: key.row,
            col: key.col,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dimension: usize,
    pub count: u64,
    pub url_template: String,
    pub created_at: DateTime<Utc>,
    /// How the stored embeddings were produced, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub featurizer: Option<FeaturizerStamp>,
}

/// Checks that `template` contains every placeholder.
pub fn validate_template(template: &str) -> Result<()> {
    let missing: Vec<&str> = URL_PLACEHOLDERS
        .iter()
        .copied()
        .filter(|p| !template.contains(p))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "url template `{template}` is missing {}",
            missing.join(", ")
        )))
    }
}

/// Substitutes `key` into a URL template.
pub fn fill_template(template: &str, key: &TileKey) -> Result<String> {
    validate_template(template)?;
    Ok(template
        .replace("{layer}", &key.layer)
        .replace("{date}", &key.date.format("%Y-%m-%d").to_string())
        .replace("{matrix}", &key.tile_matrix.to_string())
        .replace("{row}", &key.row.to_string())
        .replace("{col}", &key.col.to_string()))
}

/// Source-imagery URL of `record`. Pure string substitution.
pub fn resolve_url(record: &TileRecord, manifest: &StoreManifest) -> Result<String> {
    fill_template(&manifest.url_template, &record.key())
}

/// Layer identifiers are restricted so that substituted URLs stay
/// unambiguous path segments.
fn validate_layer(layer: &str) -> Result<()> {
    let ok = !layer.is_empty()
        && layer
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "layer `{layer}` must be non-empty ASCII letters, digits, `_`, `-` or `.`"
        )))
    }
}

/// In-memory view of a store plus, when opened for writing, the append
/// handles. Only one writer may have a store open at a time.
#[derive(Debug)]
pub struct EmbeddingStore {
    dir: PathBuf,
    manifest: StoreManifest,
    records: Vec<TileRecord>,
    embeddings: EmbeddingMatrix,
    keys: HashMap<TileKey, u64>,
    writer: Option<Writer>,
}

#[derive(Debug)]
struct Writer {
    embeddings: File,
    records: File,
}

impl EmbeddingStore {
    /// Creates a new, empty store in `dir` (created if needed).
    pub fn create(dir: impl AsRef<Path>, dimension: usize, url_template: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if dimension == 0 {
            return Err(Error::invalid("store dimension must be positive"));
        }
        validate_template(url_template)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(Error::invalid(format!(
                "a store already exists at {}",
                dir.display()
            )));
        }
        for name in [EMBEDDINGS_FILE, RECORDS_FILE] {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = StoreManifest {
            dimension,
            count: 0,
            url_template: url_template.to_string(),
            created_at: Utc::now(),
            featurizer: None,
        };
        write_manifest(&dir, &manifest)?;
        let mut store = EmbeddingStore {
            dir,
            embeddings: EmbeddingMatrix::empty(dimension),
            manifest,
            records: Vec::new(),
            keys: HashMap::new(),
            writer: None,
        };
        store.open_writer()?;
        Ok(store)
    }

    /// Opens an existing store for writing, discarding any uncommitted tail
    /// left by an interrupted insert.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let mut store = Self::load(dir.as_ref())?;
        store.truncate_uncommitted()?;
        store.open_writer()?;
        Ok(store)
    }

    /// Opens an existing store as a read-only snapshot bounded by the
    /// manifest count. Never modifies any file.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load(dir.as_ref())
    }

    /// Opens the store in `dir`, creating it if there is no manifest yet.
    pub fn open_or_create(
        dir: impl AsRef<Path>,
        dimension: usize,
        url_template: &str,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            let store = Self::open(dir)?;
            if store.dimension() != dimension {
                return Err(Error::invalid(format!(
                    "store at {} has dimension {}, expected {dimension}",
                    dir.display(),
                    store.dimension()
                )));
            }
            Ok(store)
        } else {
            Self::create(dir, dimension, url_template)
        }
    }

    fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)
            .map_err(|e| corrupt(&manifest_path, format!("bad manifest: {e}")))?;
        if manifest.dimension == 0 {
            return Err(corrupt(&manifest_path, "dimension is zero".into()));
        }
        let count = manifest.count as usize;

        let emb_path = dir.join(EMBEDDINGS_FILE);
        let row_bytes = manifest.dimension * 4;
        let mut file = File::open(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
        let mut buf = vec![0u8; count * row_bytes];
        file.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                corrupt(&emb_path, format!("fewer than the {count} committed rows"))
            } else {
                Error::io(&emb_path, e)
            }
        })?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let embeddings = EmbeddingMatrix::new(manifest.dimension, data)
            .map_err(|e| corrupt(&emb_path, e.to_string()))?;

        let rec_path = dir.join(RECORDS_FILE);
        let file = File::open(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        let mut reader = BufReader::new(file);
        let mut records = Vec::with_capacity(count);
        let mut keys = HashMap::with_capacity(count);
        let mut line = String::new();
        while records.len() < count {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(&rec_path, e))?;
            if n == 0 || !line.ends_with('\n') {
                return Err(corrupt(
                    &rec_path,
                    format!("fewer than the {count} committed records"),
                ));
            }
            let record: TileRecord = serde_json::from_str(line.trim_end())
                .map_err(|e| corrupt(&rec_path, format!("line {}: {e}", records.len() + 1)))?;
            if record.item_id != records.len() as u64 {
                return Err(corrupt(
                    &rec_path,
                    format!("line {} has item_id {}", records.len() + 1, record.item_id),
                ));
            }
            if keys.insert(record.key(), record.item_id).is_some() {
                return Err(corrupt(
                    &rec_path,
                    format!("item {} duplicates an earlier key", record.item_id),
                ));
            }
            records.push(record);
        }

        Ok(EmbeddingStore {
            dir: dir.to_path_buf(),
            manifest,
            records,
            embeddings,
            keys,
            writer: None,
        })
    }

    fn truncate_uncommitted(&self) -> Result<()> {
        let emb_path = self.dir.join(EMBEDDINGS_FILE);
        let committed = self.records.len() as u64 * self.manifest.dimension as u64 * 4;
        let f = OpenOptions::new()
            .write(true)
            .open(&emb_path)
            .map_err(|e| Error::io(&emb_path, e))?;
        f.set_len(committed).map_err(|e| Error::io(&emb_path, e))?;

        let rec_path = self.dir.join(RECORDS_FILE);
        let mut f = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&rec_path)
            .map_err(|e| Error::io(&rec_path, e))?;
        let mut reader = BufReader::new(&mut f);
        let mut offset = 0u64;
        let mut line = Vec::new();
        for _ in 0..self.records.len() {
            line.clear();
            offset += reader
                .read_until(b'\n', &mut line)
                .map_err(|e| Error::io(&rec_path, e))? as u64;
        }
        drop(reader);
        f.set_len(offset).map_err(|e| Error::io(&rec_path, e))
    }

    fn open_writer(&mut self) -> Result<()> {
        let open = |name: &str| -> Result<File> {
            let p = self.dir.join(name);
            let mut f = OpenOptions::new()
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            f.seek(SeekFrom::End(0)).map_err(|e| Error::io(&p, e))?;
            Ok(f)
        };
        self.writer = Some(Writer {
            embeddings: open(EMBEDDINGS_FILE)?,
            records: open(RECORDS_FILE)?,
        });
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dimension(&self) -> usize {
        self.manifest.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, key: &TileKey) -> Option<u64> {
        self.keys.get(key).copied()
    }

    pub fn contains(&self, key: &TileKey) -> bool {
        self.keys.contains_key(key)
    }

    /// Inserts one tile and commits it. Returns the new item id.
    pub fn insert(&mut self, key: TileKey, embedding: &Embedding) -> Result<u64> {
        let ids = self.insert_batch(std::iter::once((key, embedding.clone())))?;
        Ok(ids[0])
    }

    /// Inserts several tiles under a single commit: either all of them
    /// survive a crash or none do. A duplicate or invalid entry rejects the
    /// whole batch.
    pub fn insert_batch(
        &mut self,
        batch: impl IntoIterator<Item = (TileKey, Embedding)>,
    ) -> Result<Vec<u64>> {
        if self.writer.is_none() {
            return Err(Error::invalid("store was opened read-only"));
        }
        let dim = self.dimension();
        let start = self.records.len() as u64;
        let mut staged_keys: HashMap<TileKey, u64> = HashMap::new();
        let mut new_records = Vec::new();
        let mut emb_bytes = Vec::new();
        let mut rec_bytes = Vec::new();
        let mut rows = Vec::new();
        for (key, embedding) in batch {
            validate_layer(&key.layer)?;
            if embedding.dimension() != dim {
                return Err(Error::invalid(format!(
                    "embedding has dimension {}, store expects {dim}",
                    embedding.dimension()
                )));
            }
            if self.keys.contains_key(&key) || staged_keys.contains_key(&key) {
                return Err(Error::DuplicateRecord(format!(
                    "{} {} matrix {} row {} col {}",
                    key.layer, key.date, key.tile_matrix, key.row, key.col
                )));
            }
            let id = start + new_records.len() as u64;
            let record = TileRecord::from_key(id, key.clone());
            staged_keys.insert(key, id);
            for v in embedding.as_slice() {
                emb_bytes.extend_from_slice(&v.to_le_bytes());
            }
            serde_json::to_writer(&mut rec_bytes, &record).expect("records serialize");
            rec_bytes.push(b'\n');
            rows.push(embedding);
            new_records.push(record);
        }
        if new_records.is_empty() {
            return Ok(Vec::new());
        }

        let writer = self.writer.as_mut().expect("checked above");
        let emb_path = self.dir.join(EMBEDDINGS_FILE);
        let rec_path = self.dir.join(RECORDS_FILE);
        writer
            .embeddings
            .write_all(&emb_bytes)
            .map_err(|e| Error::io(&emb_path, e))?;
        writer
            .records
            .write_all(&rec_bytes)
            .map_err(|e| Error::io(&rec_path, e))?;
        writer
            .embeddings
            .sync_data()
            .map_err(|e| Error::io(&emb_path, e))?;
        writer
            .records
            .sync_data()
            .map_err(|e| Error::io(&rec_path, e))?;

        let mut manifest = self.manifest.clone();
        manifest.count = start + new_records.len() as u64;
        if let Err(e) = write_manifest(&self.dir, &manifest) {
            // The appended tail is uncommitted; drop it so later appends line up.
            self.truncate_uncommitted()?;
            self.open_writer()?;
            return Err(e);
        }
        self.manifest = manifest;
        for row in &rows {
            self.embeddings.push_row(row.as_slice());
        }
        self.keys.extend(staged_keys);
        let ids = new_records.iter().map(|r| r.item_id).collect();
        self.records.extend(new_records);
        Ok(ids)
    }

    /// Records which featurizer produced the stored embeddings.
    pub fn set_featurizer(&mut self, stamp: FeaturizerStamp) -> Result<()> {
        if self.writer.is_none() {
            return Err(Error::invalid("store was opened read-only"));
        }
        let mut manifest = self.manifest.clone();
        manifest.featurizer = Some(stamp);
        write_manifest(&self.dir, &manifest)?;
        self.manifest = manifest;
        Ok(())
    }

    pub fn get(&self, item_id: u64) -> Result<(TileRecord, Embedding)> {
        let record = self.record(item_id)?.clone();
        Ok((record, self.embeddings.embedding(item_id as usize)))
    }

    pub fn record(&self, item_id: u64) -> Result<&TileRecord> {
        self.records
            .get(item_id as usize)
            .ok_or_else(|| Error::NotFound(format!("item {item_id} (store holds {})", self.len())))
    }

    pub fn embedding(&self, item_id: u64) -> Result<Embedding> {
        self.record(item_id)?;
        Ok(self.embeddings.embedding(item_id as usize))
    }

    pub fn records(&self) -> &[TileRecord] {
        &self.records
    }

    /// All embeddings as a dense matrix, row `i` = item `i`.
    pub fn export_embeddings(&self) -> EmbeddingMatrix {
        self.embeddings.clone()
    }

    pub fn resolve_url(&self, record: &TileRecord) -> Result<String> {
        resolve_url(record, &self.manifest)
    }
}

fn write_manifest(dir: &Path, manifest: &StoreManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join("manifest.json.tmp");
    let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    json.push(b'\n');
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&json).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn corrupt(path: &Path, detail: String) -> Error {
    Error::CorruptStore {
        path: path.to_path_buf(),
        detail,
    }
}
