//! Declarative experiment configuration.
//!
//! One TOML file names the dataset, the backend and the output directory at
//! top level, and lists the values of each grid axis under `[grid]`.

use std::path::{Path, PathBuf};

use consult_core::episode::{AbstainStrategy, DEFAULT_MAX_QUESTIONS};
use consult_core::expert::InfoLevel;
use consult_core::metrics::DEFAULT_ECE_BINS;
use consult_core::patient::PatientVariant;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

/// Worker count for HTTP backends when none is configured.
pub const DEFAULT_HTTP_WORKERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// `scripted:<path>` or `openai`.
    pub backend: String,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    /// Bounded worker pool size; defaults by backend kind.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Option-shuffling seed; options keep their order when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_max_questions")]
    pub max_questions: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_true")]
    pub include_abstain_context: bool,
    /// Also ask each case's most-commonly-correct option and report how
    /// often final choices agree with it.
    #[serde(default)]
    pub generality: bool,
    #[serde(default)]
    pub grid: GridConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub strategies: Vec<AbstainStrategy>,
    #[serde(default = "default_numerical_thresholds")]
    pub numerical_thresholds: Vec<f64>,
    /// Scale ordinals 1..=5.
    #[serde(default = "default_scale_thresholds")]
    pub scale_thresholds: Vec<u32>,
    #[serde(default = "default_fixed_thresholds")]
    pub fixed_thresholds: Vec<usize>,
    #[serde(default = "default_rationale")]
    pub rationale: Vec<bool>,
    /// 1 disables self-consistency.
    #[serde(default = "default_sc_factors")]
    pub sc_factors: Vec<usize>,
    #[serde(default = "default_patient_variants")]
    pub patient_variants: Vec<PatientVariant>,
    /// Single-call baselines, one grid point per level.
    #[serde(default)]
    pub info_levels: Vec<InfoLevel>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            strategies: Vec::new(),
            numerical_thresholds: default_numerical_thresholds(),
            scale_thresholds: default_scale_thresholds(),
            fixed_thresholds: default_fixed_thresholds(),
            rationale: default_rationale(),
            sc_factors: default_sc_factors(),
            patient_variants: default_patient_variants(),
            info_levels: Vec::new(),
        }
    }
}

fn default_max_questions() -> usize {
    DEFAULT_MAX_QUESTIONS
}
fn default_temperature() -> f64 {
    consult_core::backend::DEFAULT_TEMPERATURE
}
fn default_top_p() -> f64 {
    consult_core::backend::DEFAULT_TOP_P
}
fn default_ece_bins() -> usize {
    DEFAULT_ECE_BINS
}
fn default_true() -> bool {
    true
}
fn default_numerical_thresholds() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9]
}
fn default_scale_thresholds() -> Vec<u32> {
    vec![2, 3, 4, 5]
}
fn default_fixed_thresholds() -> Vec<usize> {
    vec![DEFAULT_MAX_QUESTIONS / 2]
}
fn default_rationale() -> Vec<bool> {
    vec![false]
}
fn default_sc_factors() -> Vec<usize> {
    vec![1]
}
fn default_patient_variants() -> Vec<PatientVariant> {
    vec![PatientVariant::FactSelect]
}

/// Where the backend comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Scripted(PathBuf),
    OpenAi,
}

impl BackendSpec {
    pub fn parse(spec: &str, base: &Path) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("scripted:") {
            return Ok(Self::Scripted(resolve(base, Path::new(path))));
        }
        if spec == "openai" {
            return Ok(Self::OpenAi);
        }
        Err(CliError::Config(format!(
            "backend must be `scripted:<path>` or `openai`, got `{spec}`"
        )))
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.dataset = resolve(base, &config.dataset);
        config.output_dir = resolve(base, &config.output_dir);
        config.templates_dir = config.templates_dir.map(|d| resolve(base, &d));
        if let BackendSpec::Scripted(script) = BackendSpec::parse(&config.backend, base)? {
            config.backend = format!("scripted:{}", script.display());
        }
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        BackendSpec::parse(&self.backend, Path::new(""))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.grid.strategies.is_empty() && self.grid.info_levels.is_empty() {
            return bad("the grid has neither strategies nor info levels");
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1");
        }
        if self.ece_bins == 0 {
            return bad("ece_bins must be at least 1");
        }
        if self.grid.patient_variants.is_empty() && !self.grid.strategies.is_empty() {
            return bad("interactive strategies need at least one patient variant");
        }
        if self.grid.rationale.is_empty() || self.grid.sc_factors.is_empty() {
            return bad("rationale and sc_factors must list at least one value");
        }
        if self.grid.sc_factors.contains(&0) {
            return bad("sc_factors must be at least 1");
        }
        if self
            .grid
            .numerical_thresholds
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return bad("numerical thresholds must lie in [0, 1]");
        }
        if self
            .grid
            .scale_thresholds
            .iter()
            .any(|t| !(1..=5).contains(t))
        {
            return bad("scale thresholds are ordinals 1..=5");
        }
        self.backend_spec().map(|_| ())
    }

    /// Worker pool size: the configured value, else CPU count for scripted
    /// backends and a small constant for HTTP ones.
    pub fn effective_workers(&self) -> usize {
        self.workers.unwrap_or_else(|| match self.backend_spec() {
            Ok(BackendSpec::Scripted(_)) => std::thread::available_parallelism()
                .map(usize::from)
                .unwrap_or(1),
            _ => DEFAULT_HTTP_WORKERS,
        })
    }

    /// Content hash of everything that determines results: the settings,
    /// the grid, and the bytes of the dataset, script and template files.
    /// Paths, the output directory and the worker count are excluded, so a
    /// rerun elsewhere or with a different pool size keeps the fingerprint.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        let settings = serde_json::json!({
            "seed": self.seed,
            "max_questions": self.max_questions,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "ece_bins": self.ece_bins,
            "include_abstain_context": self.include_abstain_context,
            "generality": self.generality,
            "grid": self.grid,
            "backend_kind": match self.backend_spec()? {
                BackendSpec::Scripted(_) => "scripted",
                BackendSpec::OpenAi => "openai",
            },
        });
        h.update(serde_json::to_vec(&settings)?);
        h.update(b"\0dataset\0");
        h.update(std::fs::read(&self.dataset)?);
        if let BackendSpec::Scripted(script) = self.backend_spec()? {
            h.update(b"\0script\0");
            h.update(std::fs::read(script)?);
        }
        if let Some(dir) = &self.templates_dir {
            let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            names.sort();
            for name in names {
                h.update(b"\0template\0");
                h.update(name.file_name().unwrap_or_default().as_encoded_bytes());
                h.update(std::fs::read(&name)?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
