//! Pipeline configuration, read from a TOML document.
//!
//! Relative paths inside the document are resolved against the directory
//! holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::Variant;
use crate::quant::QuantConfig;
use crate::textualize::{GradeCategory, TextConfig};
use crate::tinylm::{LoraConfig, ModelConfig, TrainConfig};

pub const DEFAULT_BASE_URL: &str = "https://financialmodelingprep.com";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub ticker: String,
    pub earnings_date: NaiveDate,
}

fn default_base_url() -> String {
    DEFAULT_BASE_URL.to_string()
}
fn default_rate_limit() -> f64 {
    5.0
}
fn default_timeout() -> u64 {
    30
}
fn default_parallelism() -> usize {
    4
}
fn default_quarters() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// A JSON array of quarter records.
    Fixtures { path: PathBuf },
    /// The remote provider; the key comes from the environment.
    Provider {
        #[serde(default = "default_base_url")]
        base_url: String,
        jobs: Vec<Job>,
        #[serde(default = "default_rate_limit")]
        rate_limit: f64,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
        /// Serve responses from a recorded exchange file instead of the network.
        #[serde(default)]
        replay: Option<PathBuf>,
    },
    /// Generated records whose label follows the sign of revenue growth.
    Synthetic {
        n: usize,
        #[serde(default = "default_quarters")]
        quarters_per_ticker: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.8, test: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextSection {
    pub instruction: Option<String>,
    pub max_tokens: Option<usize>,
    pub max_vocab: usize,
    /// Extra or replacement raw-grade mappings, e.g. `"Sector Perform" = "hold"`.
    pub grades: BTreeMap<String, GradeCategory>,
    /// Extra growth-field display names, e.g. `growthFoo = "Foo"`.
    pub metrics: BTreeMap<String, String>,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            instruction: None,
            max_tokens: None,
            max_vocab: 4096,
            grades: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }
}

impl TextSection {
    pub fn text_config(&self) -> TextConfig {
        let mut cfg = TextConfig::default();
        if let Some(i) = &self.instruction {
            cfg.instruction = i.clone();
        }
        cfg.max_tokens = self.max_tokens;
        for (g, c) in &self.grades {
            cfg.grades.insert(g, *c);
        }
        for (k, v) in &self.metrics {
            cfg.metrics.insert(k.clone(), v.clone());
        }
        cfg
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_model_name() -> String {
    "tinylm-nf4".to_string()
}
fn default_variant() -> Variant {
    Variant::Base
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Row label in the comparison table.
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub text: TextSection,
    /// `vocab_size` is ignored; it is taken from the built vocabulary.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub lora: LoraConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        match &mut self.data {
            DataSource::Fixtures { path } => fix(path),
            DataSource::Provider { replay: Some(p), .. } => fix(p),
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.split;
        if !(s.train > 0.0 && s.test > 0.0) || (s.train + s.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be positive and sum to 1".into()));
        }
        if self.model_name.is_empty() || self.model_name.contains(',') {
            return Err(Error::Config("model_name must be non-empty and contain no commas".into()));
        }
        if self.text.max_vocab < 8 {
            return Err(Error::Config("max_vocab must be at least 8".into()));
        }
        if let DataSource::Synthetic { n: 0, .. } = self.data {
            return Err(Error::Config("synthetic n must be at least 1".into()));
        }
        self.train.validate()
    }

    /// Directory holding one variant's dataset, checkpoint, and report.
    pub fn variant_dir(&self) -> PathBuf {
        self.out_dir.join(self.variant.to_string().to_ascii_lowercase())
    }
}
