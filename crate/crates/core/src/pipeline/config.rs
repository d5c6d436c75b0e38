use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::BackendConfig;
use crate::stats::BootstrapConfig;

use super::PipelineError;

/// Corpus source files. Any of them may be omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub abstracts: Option<PathBuf>,
    pub case_reports: Option<PathBuf>,
    pub study_items: Option<PathBuf>,
    /// Journal whitelist for abstracts; defaults to the built-in list.
    pub journals: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    /// Backend that writes case-report answers.
    pub weak_label: Option<BackendConfig>,
    /// Case questions to ask, 1-based; all fifteen by default.
    pub case_questions: Option<Vec<u8>>,
    /// Seeded sample of case reports to use; all of them by default.
    pub max_case_reports: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Cap on validation instances evaluated per internal task.
    pub max_per_task: Option<usize>,
    /// JSONL of `{id, question, answer}` patient questions.
    pub external_long_form: Option<PathBuf>,
    /// JSONL of `{id, question, options, answer}` with a letter answer.
    pub external_mcq: Option<PathBuf>,
    /// Base URL of the neural scorer; neural scores are skipped if unset.
    pub scorer_endpoint: Option<String>,
    /// Bonferroni factor; defaults to the number of non-reference models.
    pub n_comparisons: Option<usize>,
    /// Concurrent requests per backend.
    pub max_in_flight: Option<usize>,
}

/// An evaluated model answered live by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBackend {
    pub name: String,
    #[serde(flatten)]
    pub backend: BackendConfig,
}

/// An evaluated model whose responses were produced elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportedModel {
    pub name: String,
    /// JSONL of `{item_id, response}`.
    pub responses: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanEvalConfig {
    pub session_id: String,
    /// JSONL sample import file.
    pub samples: PathBuf,
    pub models: Vec<String>,
    pub raters: Vec<String>,
    #[serde(default = "default_store")]
    pub store_dir: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
}

fn default_store() -> PathBuf {
    PathBuf::from("humaneval")
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSettings {
    pub sample_size: usize,
    pub repetitions: usize,
    pub ci_level: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        let d = BootstrapConfig::default();
        Self {
            sample_size: d.sample_size,
            repetitions: d.repetitions,
            ci_level: d.ci_level,
        }
    }
}

impl BootstrapSettings {
    pub fn with_seed(&self, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            sample_size: self.sample_size,
            repetitions: self.repetitions,
            ci_level: self.ci_level,
            seed,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the directory
/// holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub reference_model: String,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// If set, the built-in template registry digest must equal it.
    #[serde(default)]
    pub template_digest: Option<String>,
    #[serde(default)]
    pub corpus: CorpusPaths,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    #[serde(default)]
    pub backends: Vec<ModelBackend>,
    #[serde(default)]
    pub imported: Vec<ImportedModel>,
    #[serde(default)]
    pub humaneval: Option<HumanEvalConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn cache_path(&self) -> PathBuf {
        match &self.cache_dir {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("cache"),
        }
    }

    /// Model names in column order: live backends, then imports.
    pub fn model_names(&self) -> Vec<String> {
        self.backends
            .iter()
            .map(|b| b.name.clone())
            .chain(self.imported.iter().map(|m| m.name.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        let names = self.model_names();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return bad("model names must be unique across backends and imports".into());
        }
        if !names.contains(&self.reference_model) {
            return bad(format!("reference model {:?} is not a configured backend or import", self.reference_model));
        }
        if names.len() < 2 {
            return bad("at least two models are needed for comparisons".into());
        }
        for b in &self.backends {
            b.backend
                .clone()
                .validated()
                .map_err(|e| PipelineError::ConfigInvalid(format!("backend {}: {e}", b.name)))?;
        }
        if let Some(w) = &self.curation.weak_label {
            w.clone()
                .validated()
                .map_err(|e| PipelineError::ConfigInvalid(format!("weak-label backend: {e}")))?;
        }
        if let Some(qs) = &self.curation.case_questions {
            if qs.iter().any(|q| !(1..=15).contains(q)) {
                return bad("case_questions must lie in 1..=15".into());
            }
        }
        self.bootstrap
            .with_seed(self.seed)
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        if let Some(h) = &self.humaneval {
            if h.models.len() < 2 || h.raters.is_empty() {
                return bad("humaneval needs at least two models and one rater".into());
            }
        }
        Ok(())
    }

    /// Stable digest of the settings that influence artifacts.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let canonical: BTreeMap<String, serde_json::Value> = serde_json::from_value(v).expect("object");
        crate::util::sha256_hex(serde_json::to_string(&canonical).expect("json").as_bytes())
    }
}
