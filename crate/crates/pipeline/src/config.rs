//! TOML pipeline configuration.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use medex_core::labelmodel::TrainingConfig;
use medex_core::promptex::LlmConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{check_contiguous, Stage};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{what} not found at {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Patient-ID serial registry; defaults to `<output_dir>/registry.tsv`.
    pub registry: Option<PathBuf>,
    /// Label-model checkpoint, required by the anonymize stage.
    pub model: Option<PathBuf>,
    pub lf_set: Option<PathBuf>,
    pub heading_config: Option<PathBuf>,
    pub template: Option<PathBuf>,
    /// Rater annotations CSV, required by the validate stage.
    pub annotations: Option<PathBuf>,
    /// Token gold labels for `train-labelmodel`.
    pub gold_labels: Option<PathBuf>,
    /// Answer key used by the mock LLM transport.
    pub mock_answers: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("input"),
            output_dir: PathBuf::from("output"),
            registry: None,
            model: None,
            lf_set: None,
            heading_config: None,
            template: None,
            annotations: None,
            gold_labels: None,
            mock_answers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub anonymize: bool,
    pub fields: bool,
    pub features: bool,
    pub validate: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            anonymize: true,
            fields: true,
            features: true,
            validate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Jobs allowed to run at once; further jobs wait in the queue.
    pub job_workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            job_workers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub llm: LlmConfig,
    pub stages: StageToggles,
    /// Per-document parallelism inside a stage.
    pub workers: usize,
    /// Use the offline answer-key transport instead of the HTTP endpoint.
    pub mock_llm: bool,
    pub server: ServerConfig,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            llm: LlmConfig::default(),
            stages: StageToggles::default(),
            workers: 4,
            mock_llm: false,
            server: ServerConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.input_dir);
        fix(&mut p.output_dir);
        for q in [
            &mut p.registry,
            &mut p.model,
            &mut p.lf_set,
            &mut p.heading_config,
            &mut p.template,
            &mut p.annotations,
            &mut p.gold_labels,
            &mut p.mock_answers,
        ]
        .into_iter()
        .flatten()
        {
            fix(q);
        }
    }

    pub fn registry_path(&self) -> PathBuf {
        self.paths
            .registry
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("registry.tsv"))
    }

    /// Stages switched on in `[stages]`, in pipeline order.
    pub fn enabled_stages(&self) -> Vec<Stage> {
        let s = self.stages;
        let on = [s.anonymize, s.fields, s.features, s.validate];
        Stage::ALL.iter().zip(on).filter(|(_, on)| *on).map(|(st, _)| *st).collect()
    }

    /// Checks the config for a full run of the enabled stages, which must
    /// form a prefix of the pipeline order.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let stages = self.enabled_stages();
        if stages.first().is_some_and(|s| *s != Stage::Anonymize) {
            return Err(ConfigError::Invalid(
                "enabled stages must be a prefix of anonymize, fields, features, validate".into(),
            ));
        }
        self.validate_for(&stages)
    }

    /// Value checks plus existence of every file `stages` need. `stages`
    /// must be contiguous in pipeline order; it may be empty for commands
    /// that run no stage.
    pub fn validate_for(&self, stages: &[Stage]) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        if self.server.job_workers == 0 {
            return Err(ConfigError::Invalid("server.job_workers must be >= 1".into()));
        }
        self.llm.validate().map_err(ConfigError::Invalid)?;
        self.training
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check_contiguous(stages).map_err(ConfigError::Invalid)?;

        // paths are checked only when something in this run reads them
        let p = &self.paths;
        let need = |what: &'static str, path: &Option<PathBuf>, used: bool, required: bool| match path {
            Some(path) if used && !path.exists() => Err(ConfigError::MissingPath {
                what,
                path: path.clone(),
            }),
            None if used && required => Err(ConfigError::Invalid(format!("paths.{what} is required"))),
            _ => Ok(()),
        };
        let runs = |s: Stage| stages.contains(&s);
        need("model", &p.model, runs(Stage::Anonymize), true)?;
        need("lf_set", &p.lf_set, true, false)?;
        need("heading_config", &p.heading_config, runs(Stage::Fields), false)?;
        need("template", &p.template, runs(Stage::Features), false)?;
        need("annotations", &p.annotations, runs(Stage::Validate), true)?;
        need("mock_answers", &p.mock_answers, self.mock_llm && runs(Stage::Features), false)?;
        Ok(())
    }
}
