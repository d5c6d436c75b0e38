//! End-to-end orchestration: stages, artifacts and the run manifest.

pub mod config;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

pub use config::RunConfig;
pub use stages::{EvalItem, ModelResponse, ScoreRecord};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} needs {path}; run the earlier stages first")]
    MissingUpstreamArtifact { stage: Stage, path: PathBuf },
    #[error("stage {stage} failed: {message}")]
    StageFailed { stage: Stage, message: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn failed(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError::StageFailed {
            stage,
            message: message.to_string(),
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Curate,
    Split,
    Infer,
    Extract,
    Score,
    Compare,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Curate,
        Stage::Split,
        Stage::Infer,
        Stage::Extract,
        Stage::Score,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Curate => "curate",
            Stage::Split => "split",
            Stage::Infer => "infer",
            Stage::Extract => "extract",
            Stage::Score => "score",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Artifact file names, relative to the output directory.
pub mod artifacts {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const INSTRUCTIONS: &str = "instructions.jsonl";
    pub const CURATION_REPORT: &str = "curation_report.json";
    pub const SPLIT: &str = "split.json";
    pub const EVAL_ITEMS: &str = "eval_items.jsonl";
    pub const RESPONSES: &str = "responses.jsonl";
    pub const EXTRACTED: &str = "extracted.jsonl";
    pub const SCORES: &str = "scores.jsonl";
    pub const CLASSIFICATION: &str = "classification.json";
    pub const NEURAL: &str = "neural_scores.json";
    pub const COMPARISON_CSV: &str = "comparison.csv";
    pub const COMPARISONS: &str = "comparisons.json";
    pub const REPORT: &str = "report.md";
    pub const METRIC_TABLE_CSV: &str = "metric_table.csv";
    pub const RATING_TABLE_CSV: &str = "rating_table.csv";
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Digests of every stage's inputs and outputs, plus the seed and tool
/// version that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
    pub template_digest: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Manifest {
        fs::read(out_dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs, config and outputs all matched the manifest.
    UpToDate,
}

/// Runtime knobs that do not affect artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, force: false }
    }
}

fn rel_name(out_dir: &Path, base: &Path, p: &Path) -> String {
    p.strip_prefix(out_dir)
        .or_else(|_| p.strip_prefix(base))
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Runs `stages` in pipeline order.
pub fn run_pipeline(
    cfg: &RunConfig,
    stages: &[Stage],
    opts: RunOptions,
) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
    let registry = crate::curation::templates::TemplateRegistry::builtin();
    let template_digest = registry.digest();
    if let Some(pinned) = &cfg.template_digest {
        if *pinned != template_digest {
            return Err(PipelineError::ConfigInvalid(format!(
                "template digest {template_digest} does not match the pinned {pinned}"
            )));
        }
    }
    let out_dir = cfg.out_dir();
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut manifest = Manifest::load(&out_dir);
    manifest.tool_version = TOOL_VERSION.to_string();
    manifest.seed = cfg.seed;
    manifest.config_digest = cfg.digest();
    manifest.template_digest = template_digest.clone();

    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut outcomes = Vec::new();
    for stage in ordered {
        let inputs = stages::inputs(cfg, stage);
        for p in &inputs.required {
            if !p.exists() {
                return Err(PipelineError::MissingUpstreamArtifact {
                    stage,
                    path: p.clone(),
                });
            }
        }
        let mut input_digests = BTreeMap::new();
        for p in inputs.required.iter().chain(inputs.optional.iter().filter(|p| p.exists())) {
            input_digests.insert(rel_name(&out_dir, &cfg.base_dir, p), file_digest(p)?);
        }
        let fingerprint = sha256_hex(
            serde_json::to_string(&(
                stage,
                TOOL_VERSION,
                &manifest.config_digest,
                &template_digest,
                &input_digests,
            ))
            .expect("json")
            .as_bytes(),
        );
        if !opts.force {
            if let Some(prev) = manifest.stages.get(&stage) {
                let outputs_intact = prev.outputs.iter().all(|(name, digest)| {
                    file_digest(&out_dir.join(name)).map(|d| d == *digest).unwrap_or(false)
                });
                if prev.fingerprint == fingerprint && outputs_intact {
                    log::info!("{stage}: up to date");
                    outcomes.push((stage, StageOutcome::UpToDate));
                    continue;
                }
            }
        }
        log::info!("{stage}: running");
        let outputs = stages::run(cfg, stage, opts, &registry)?;
        let mut output_digests = BTreeMap::new();
        for p in outputs {
            output_digests.insert(rel_name(&out_dir, &cfg.base_dir, &p), file_digest(&p)?);
        }
        manifest.stages.insert(
            stage,
            StageRecord {
                fingerprint,
                inputs: input_digests,
                outputs: output_digests,
            },
        );
        manifest.save(&out_dir)?;
        outcomes.push((stage, StageOutcome::Ran));
    }
    Ok(outcomes)
}

/// Creates the configured rating session if it is not stored yet and
/// returns the service state backed by the session store.
pub fn prepare_humaneval(cfg: &RunConfig) -> Result<crate::humaneval::service::ServiceState, PipelineError> {
    use crate::humaneval::{read_samples, service::ServiceState, EvalSession, SessionStore};
    let h = cfg
        .humaneval
        .as_ref()
        .ok_or_else(|| PipelineError::ConfigInvalid("no [humaneval] section".into()))?;
    let store = SessionStore::new(cfg.resolve(&h.store_dir));
    if !store.exists(&h.session_id) {
        let path = cfg.resolve(&h.samples);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let samples = read_samples(std::io::BufReader::new(file)).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        let seed = crate::util::derive_seed(cfg.seed, &format!("humaneval/{}", h.session_id));
        let session = EvalSession::create(h.session_id.clone(), samples, h.models.clone(), h.raters.clone(), seed)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        store.create(&session).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        log::info!("created rating session {} ({} slots)", session.id, session.total_slots());
    }
    Ok(ServiceState::persistent(store))
}
