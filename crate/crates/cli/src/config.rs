//! Run configuration read from JSON.

use std::path::{Path, PathBuf};

use glimpse_core::learning::OptimizerConfig;
use glimpse_core::retina::{frey_offsets, mnist_offsets, Offset, RetinaSpec};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training images (GLIM image set).
    pub train: Option<PathBuf>,
    /// Test images (GLIM image set).
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub retina: RetinaSpec,
    #[serde(default)]
    pub offsets: OffsetTable,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub learning: LearningConfig,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// `"frey"`, `"mnist"` or an explicit list of `[dr, dc]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OffsetTable {
    Named(String),
    List(Vec<Offset>),
}

impl Default for OffsetTable {
    fn default() -> Self {
        OffsetTable::Named("frey".into())
    }
}

impl OffsetTable {
    pub fn resolve(&self) -> Result<Vec<Offset>, CliError> {
        match self {
            OffsetTable::Named(n) if n == "frey" => Ok(frey_offsets()),
            OffsetTable::Named(n) if n == "mnist" => Ok(mnist_offsets()),
            OffsetTable::Named(n) => Err(CliError::Usage(format!(
                "unknown offset table \"{n}\" (expected \"frey\", \"mnist\" or a list of [dr, dc] pairs)"
            ))),
            OffsetTable::List(v) if v.is_empty() => Err(CliError::Usage("offset list is empty".into())),
            OffsetTable::List(v) => Ok(v.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fa,
    Ppca,
    Mofa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub k: usize,
    pub m: usize,
    pub em_iterations: usize,
    pub em_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Fa,
            k: 43,
            m: 1,
            em_iterations: 500,
            em_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Stratified,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Missing-data PPCA on upsampled glimpses.
    Glimpses,
    /// An x-space model file.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    pub protocol: Protocol,
    /// Records per offset for the stratified protocol.
    pub per_offset: usize,
    /// Records for the uniform protocol.
    pub n: usize,
    /// Score all glimpses of an image jointly.
    pub grouped: bool,
    pub init: InitKind,
    pub init_model: Option<PathBuf>,
    pub init_iterations: usize,
    pub init_tol: f64,
    /// Optimize only the y-space noise.
    pub fix_w: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Stratified,
            per_offset: 100,
            n: 3500,
            grouped: false,
            init: InitKind::Glimpses,
            init_model: None,
            init_iterations: 200,
            init_tol: 1e-7,
            fix_w: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DesignMode {
    Exhaustive,
    Greedy,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub mode: DesignMode,
    pub j: usize,
    pub allow_duplicates: bool,
    pub top: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            mode: DesignMode::Exhaustive,
            j: 2,
            allow_duplicates: false,
            top: 10,
        }
    }
}

impl RunConfig {
    /// Parse and validate; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train, &mut cfg.test, &mut cfg.learning.init_model]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.retina.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.offsets.resolve()?;
        if self.model.k == 0 {
            return Err(CliError::Usage("model.k must be at least 1".into()));
        }
        if self.model.m == 0 {
            return Err(CliError::Usage("model.m must be at least 1".into()));
        }
        if self.model.kind != ModelKind::Mofa && self.model.m != 1 {
            return Err(CliError::Usage(format!(
                "model.m = {} needs kind \"mofa\"",
                self.model.m
            )));
        }
        if !(self.model.em_tol > 0.0 && self.learning.init_tol > 0.0) {
            return Err(CliError::Usage("tolerances must be positive".into()));
        }
        self.learning
            .optimizer
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.learning.per_offset == 0 || self.learning.n == 0 {
            return Err(CliError::Usage("learning sample sizes must be at least 1".into()));
        }
        if self.learning.init == InitKind::Model && self.learning.init_model.is_none() {
            return Err(CliError::Usage(
                "learning.init = \"model\" needs learning.init_model".into(),
            ));
        }
        if self.design.j == 0 {
            return Err(CliError::Usage("design.j must be at least 1".into()));
        }
        Ok(())
    }
}

/// Named random substreams derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Split = 1,
    Sampling = 2,
    KMeans = 3,
    RandomDesign = 4,
}

pub fn substream(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}
