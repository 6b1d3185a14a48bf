use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::featurizer::ProviderDescriptor;
use crate::store::validate_template;
use crate::{Error, Result};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

/// Service configuration file (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub index_path: PathBuf,
    pub store_path: PathBuf,
    /// Query-time featurizer. Defaults to the one recorded in the store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderDescriptor>,
    /// Overrides the store's URL template when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url_template: Option<String>,
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Allowed browser origin; `"*"` allows any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cors_origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_budget: Option<usize>,
}

fn default_bind() -> String {
    DEFAULT_BIND.to_string()
}

impl ServiceConfig {
    pub fn new(index_path: impl Into<PathBuf>, store_path: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            index_path: index_path.into(),
            store_path: store_path.into(),
            provider: None,
            url_template: None,
            bind: default_bind(),
            cors_origin: None,
            search_budget: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ServiceConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.url_template {
            validate_template(t).map_err(|e| Error::InvalidConfig(format!("url_template: {e}")))?;
        }
        if let Some(p) = &self.provider {
            p.validate()
                .map_err(|e| Error::InvalidConfig(format!("provider: {e}")))?;
        }
        if self.search_budget == Some(0) {
            return Err(Error::InvalidConfig(
                "search_budget: must be positive".into(),
            ));
        }
        self.bind
            .parse::<std::net::SocketAddr>()
            .map_err(|e| Error::InvalidConfig(format!("bind: `{}`: {e}", self.bind)))?;
        Ok(())
    }
}
