//! TOML configuration. Every field is optional; a value passed explicitly
//! on the command line wins over the file, and the file wins over the
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use embrag::embeddings::TrainConfig;
use embrag::llm::{CompletionParams, HttpConfig};
use embrag::mining::ProbabilityMode;
use embrag::retrieval::BeamConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub answer_threshold: Option<f64>,
    pub paths: Paths,
    pub train: Option<TrainConfig>,
    pub beam: Option<BeamConfig>,
    pub mining: Mining,
    pub pipeline: PipelineSection,
    pub backend: Backend,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub triples: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mining {
    pub max_len: Option<usize>,
    pub mode: Option<ProbabilityMode>,
    pub walk_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub rules_per_question: Option<usize>,
    pub max_rule_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Null,
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backend {
    pub kind: Option<BackendKind>,
    pub mock_fixture: Option<PathBuf>,
    pub http: Option<HttpConfig>,
    pub completion: Option<CompletionParams>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
