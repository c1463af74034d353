//! Declarative collection config (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use descry_core::describability::DEFAULT_PROMPT_TEMPLATE;
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub dataset_id: String,
    pub annotation_path: PathBuf,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub embedding_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioPair {
    pub ovd: String,
    pub cod: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionConfig {
    pub datasets: Vec<DatasetEntry>,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub prompt_embedding_path: Option<PathBuf>,
    #[serde(default)]
    pub split_sizes: Vec<usize>,
    #[serde(default = "default_shots")]
    pub shots: Vec<u32>,
    #[serde(default = "default_seeds")]
    pub seeds: u32,
    #[serde(default)]
    pub ratio_pairs: Vec<RatioPair>,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_owned()
}

fn default_shots() -> Vec<u32> {
    vec![1, 3, 5, 10]
}

fn default_seeds() -> u32 {
    5
}

/// Raised for config files that exist but cannot be used.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl CollectionConfig {
    /// Parses the file and resolves every path against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: CollectionConfig = toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut cfg.datasets {
            d.annotation_path = base.join(&d.annotation_path);
            d.image_root = d.image_root.as_ref().map(|p| base.join(p));
            d.embedding_path = d.embedding_path.as_ref().map(|p| base.join(p));
        }
        cfg.prompt_embedding_path = cfg.prompt_embedding_path.as_ref().map(|p| base.join(p));
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.dataset_id.as_str()) {
                bail!(ConfigError(format!("dataset_id {:?} is listed twice", d.dataset_id)));
            }
        }
        if self.shots.contains(&0) {
            bail!(ConfigError("shots must be positive".into()));
        }
        if !self.prompt_template.contains("{}") {
            bail!(ConfigError("prompt_template must contain {}".into()));
        }
        Ok(())
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetEntry> {
        self.datasets.iter().find(|d| d.dataset_id == id)
    }
}
