use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use serde::Deserialize;
use tilesearch::ann::Metric;
use tilesearch::featurizer::ProviderDescriptor;

/// Values any subcommand may take from `--config`. Command-line flags take
/// precedence over these.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub store_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub url_template: Option<String>,
    pub provider: Option<ProviderDescriptor>,

    pub layer: Option<String>,
    pub dates: Option<Vec<NaiveDate>>,
    pub level: Option<u32>,
    pub rows: Option<String>,
    pub cols: Option<String>,
    pub max_parallel: Option<usize>,
    pub min_delay_ms: Option<u64>,

    pub trees: Option<usize>,
    pub leaf: Option<usize>,
    pub metric: Option<Metric>,
    pub seed: Option<u64>,

    pub k: Option<usize>,
    pub queries: Option<usize>,
    pub search_budget: Option<usize>,

    pub bind: Option<String>,
    pub cors_origin: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))
    }
}

/// Takes the flag when given, the config value otherwise.
pub fn pick<T>(flag: Option<T>, file: &Option<T>) -> Option<T>
where
    T: Clone,
{
    flag.or_else(|| file.clone())
}

/// Like [`pick`], failing with the flag name when neither is set.
pub fn require<T: Clone>(flag: Option<T>, file: &Option<T>, name: &str) -> anyhow::Result<T> {
    match pick(flag, file) {
        Some(v) => Ok(v),
        None => bail!("missing --{name} (no value on the command line or in the config file)"),
    }
}

/// Parses an inclusive `START-END` range or a single index.
pub fn parse_range(text: &str) -> anyhow::Result<(u32, u32)> {
    let text = text.trim();
    let parse = |s: &str| {
        s.trim()
            .parse::<u32>()
            .with_context(|| format!("bad range `{text}`: expected START-END or a single index"))
    };
    match text.split_once('-') {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi)?)),
        None => {
            let v = parse(text)?;
            Ok((v, v))
        }
    }
}
