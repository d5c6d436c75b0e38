//! Blinded two-rater evaluation of free-text responses.

pub mod rubric;
pub mod service;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use rubric::{Rubric, RUBRIC_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HumanEvalError {
    #[error("duplicate sample id {0}")]
    DuplicateSampleIds(String),
    #[error("a session needs at least one sample, two models and one rater")]
    TooSmall,
    #[error("sample {sample} has no response from {model}")]
    MissingResponse { sample: String, model: String },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error("rater {0} is not part of this session")]
    UnknownRater(String),
    #[error("no slot {slot} for sample {sample}")]
    UnknownSlot { sample: String, slot: usize },
    #[error("{dimension} score {value} is outside 1..=5")]
    OutOfRange { dimension: Dimension, value: i64 },
    #[error("rater {rater} already rated slot {slot} of sample {sample}")]
    AlreadyRated { rater: String, sample: String, slot: usize },
    #[error("storage: {0}")]
    Storage(String),
}

fn storage(e: impl fmt::Display) -> HumanEvalError {
    HumanEvalError::Storage(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Correctness,
    Completeness,
    Readability,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Correctness, Dimension::Completeness, Dimension::Readability];

    pub fn label(self) -> &'static str {
        match self {
            Dimension::Correctness => "Correctness",
            Dimension::Completeness => "Completeness",
            Dimension::Readability => "Readability",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    EhrSummarization,
    ClinicalQa,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 2] = [TaskGroup::EhrSummarization, TaskGroup::ClinicalQa];

    pub fn label(self) -> &'static str {
        match self {
            TaskGroup::EhrSummarization => "Patient EHR summarization",
            TaskGroup::ClinicalQa => "Clinical QA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub note_ref: String,
    pub note_text: String,
    pub task_group: TaskGroup,
    /// Response text keyed by model id.
    pub responses: BTreeMap<String, String>,
}

/// Reads a JSONL sample import file.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<Sample>, HumanEvalError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(storage)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| storage(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub rater_id: String,
    pub sample_id: String,
    pub display_slot: usize,
    pub correctness: u8,
    pub completeness: u8,
    pub readability: u8,
    pub rubric_version: String,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RatingRecord {
    pub fn score(&self, d: Dimension) -> u8 {
        match d {
            Dimension::Correctness => self.correctness,
            Dimension::Completeness => self.completeness,
            Dimension::Readability => self.readability,
        }
    }
}

/// What a rater submits. Scores are wide integers so out-of-range
/// values reach validation instead of failing deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub rater_id: String,
    pub sample_id: String,
    pub display_slot: usize,
    pub correctness: i64,
    pub completeness: i64,
    pub readability: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedResponse {
    /// 1-based display position.
    pub slot: usize,
    pub label: String,
    pub text: String,
    pub rated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub session_id: String,
    pub sample_id: String,
    pub sample_number: usize,
    pub total_samples: usize,
    pub task_group: String,
    pub note_text: String,
    pub responses: Vec<BlindedResponse>,
    pub rubric: Rubric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item(Box<BlindedItem>),
    Done,
}

/// Session definition plus the ratings collected so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSession {
    pub id: String,
    pub samples: Vec<Sample>,
    pub models: Vec<String>,
    pub raters: Vec<String>,
    pub seed: u64,
    /// `assignment[s][k]` is the index into `models` shown in display
    /// slot `k + 1` of sample `s`.
    pub assignment: Vec<Vec<usize>>,
    #[serde(skip)]
    ratings: Vec<RatingRecord>,
    #[serde(skip)]
    rated: HashSet<(String, usize, usize)>,
}

impl EvalSession {
    pub fn create(
        id: impl Into<String>,
        samples: Vec<Sample>,
        models: Vec<String>,
        raters: Vec<String>,
        seed: u64,
    ) -> Result<Self, HumanEvalError> {
        if samples.is_empty() || models.len() < 2 || raters.is_empty() {
            return Err(HumanEvalError::TooSmall);
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(HumanEvalError::DuplicateSampleIds(s.sample_id.clone()));
            }
            for m in &models {
                if !s.responses.contains_key(m) {
                    return Err(HumanEvalError::MissingResponse {
                        sample: s.sample_id.clone(),
                        model: m.clone(),
                    });
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assignment = samples
            .iter()
            .map(|_| {
                let mut perm: Vec<usize> = (0..models.len()).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();
        Ok(Self {
            id: id.into(),
            samples,
            models,
            raters,
            seed,
            assignment,
            ratings: Vec::new(),
            rated: HashSet::new(),
        })
    }

    pub fn ratings(&self) -> &[RatingRecord] {
        &self.ratings
    }

    /// Rating slots across all raters.
    pub fn total_slots(&self) -> usize {
        self.raters.len() * self.samples.len() * self.models.len()
    }

    pub fn pending_slots(&self) -> usize {
        self.total_slots() - self.rated.len()
    }

    pub fn is_complete(&self) -> bool {
        self.pending_slots() == 0
    }

    fn check_rater(&self, rater: &str) -> Result<(), HumanEvalError> {
        if self.raters.iter().any(|r| r == rater) {
            Ok(())
        } else {
            Err(HumanEvalError::UnknownRater(rater.to_string()))
        }
    }

    fn is_rated(&self, rater: &str, sample: usize, slot: usize) -> bool {
        self.rated.contains(&(rater.to_string(), sample, slot))
    }

    /// The lowest-numbered sample this rater still has pending slots on.
    pub fn next_item(&self, rater: &str) -> Result<NextItem, HumanEvalError> {
        self.check_rater(rater)?;
        let k = self.models.len();
        let Some(s) = (0..self.samples.len()).find(|&s| (1..=k).any(|slot| !self.is_rated(rater, s, slot))) else {
            return Ok(NextItem::Done);
        };
        let sample = &self.samples[s];
        let responses = self.assignment[s]
            .iter()
            .enumerate()
            .map(|(pos, &model)| BlindedResponse {
                slot: pos + 1,
                label: format!("Response {}", pos + 1),
                text: sample.responses[&self.models[model]].clone(),
                rated: self.is_rated(rater, s, pos + 1),
            })
            .collect();
        Ok(NextItem::Item(Box::new(BlindedItem {
            session_id: self.id.clone(),
            sample_id: sample.sample_id.clone(),
            sample_number: s + 1,
            total_samples: self.samples.len(),
            task_group: sample.task_group.label().to_string(),
            note_text: sample.note_text.clone(),
            responses,
            rubric: Rubric::standard(),
        })))
    }

    /// Validates a submission and turns it into a record without
    /// applying it.
    pub fn check_submission(&self, sub: &RatingSubmission, timestamp_ms: u64) -> Result<RatingRecord, HumanEvalError> {
        self.check_rater(&sub.rater_id)?;
        let s = self
            .samples
            .iter()
            .position(|x| x.sample_id == sub.sample_id)
            .ok_or_else(|| HumanEvalError::UnknownSlot {
                sample: sub.sample_id.clone(),
                slot: sub.display_slot,
            })?;
        if sub.display_slot == 0 || sub.display_slot > self.models.len() {
            return Err(HumanEvalError::UnknownSlot {
                sample: sub.sample_id.clone(),
                slot: sub.display_slot,
            });
        }
        let mut scores = [0u8; 3];
        for (i, (d, v)) in Dimension::ALL
            .iter()
            .zip([sub.correctness, sub.completeness, sub.readability])
            .enumerate()
        {
            if !(1..=5).contains(&v) {
                return Err(HumanEvalError::OutOfRange { dimension: *d, value: v });
            }
            scores[i] = v as u8;
        }
        if self.is_rated(&sub.rater_id, s, sub.display_slot) {
            return Err(HumanEvalError::AlreadyRated {
                rater: sub.rater_id.clone(),
                sample: sub.sample_id.clone(),
                slot: sub.display_slot,
            });
        }
        Ok(RatingRecord {
            session_id: self.id.clone(),
            rater_id: sub.rater_id.clone(),
            sample_id: sub.sample_id.clone(),
            display_slot: sub.display_slot,
            correctness: scores[0],
            completeness: scores[1],
            readability: scores[2],
            rubric_version: RUBRIC_VERSION.to_string(),
            timestamp_ms,
            note: sub.note.clone().filter(|n| !n.trim().is_empty()),
        })
    }

    /// Applies an already-validated record.
    pub fn apply(&mut self, record: RatingRecord) -> Result<(), HumanEvalError> {
        let s = self
            .samples
            .iter()
            .position(|x| x.sample_id == record.sample_id)
            .ok_or_else(|| HumanEvalError::UnknownSlot {
                sample: record.sample_id.clone(),
                slot: record.display_slot,
            })?;
        if !self.rated.insert((record.rater_id.clone(), s, record.display_slot)) {
            return Err(HumanEvalError::AlreadyRated {
                rater: record.rater_id,
                sample: record.sample_id,
                slot: record.display_slot,
            });
        }
        self.ratings.push(record);
        Ok(())
    }

    pub fn submit_rating(&mut self, sub: &RatingSubmission, timestamp_ms: u64) -> Result<RatingRecord, HumanEvalError> {
        let record = self.check_submission(sub, timestamp_ms)?;
        self.apply(record.clone())?;
        Ok(record)
    }

    /// Model id behind a display slot.
    pub fn model_at(&self, sample_index: usize, slot: usize) -> &str {
        &self.models[self.assignment[sample_index][slot - 1]]
    }

    pub fn aggregate(&self) -> AggregateReport {
        aggregate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub task_group: TaskGroup,
    pub model: String,
    pub dimension: Dimension,
    pub mean: Option<f64>,
    pub n_ratings: usize,
}

/// Rater-averaged score for one sample, model and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub task_group: TaskGroup,
    pub model: String,
    pub dimension: Dimension,
    pub mean: f64,
    pub n_raters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub session_id: String,
    pub complete: bool,
    pub models: Vec<String>,
    pub cells: Vec<AggregateCell>,
    pub per_sample: Vec<SampleScore>,
}

impl AggregateReport {
    pub fn cell(&self, group: TaskGroup, model: &str, dimension: Dimension) -> Option<&AggregateCell> {
        self.cells
            .iter()
            .find(|c| c.task_group == group && c.model == model && c.dimension == dimension)
    }

    pub fn groups(&self) -> Vec<TaskGroup> {
        let mut g: Vec<TaskGroup> = self.cells.iter().map(|c| c.task_group).collect();
        g.sort();
        g.dedup();
        g
    }
}

/// Un-blinds every rating and averages per (group, model, dimension)
/// over all raters and samples, and per sample over raters.
pub fn aggregate(session: &EvalSession) -> AggregateReport {
    // (group, model, dim) -> (sum, count); (sample, model, dim) -> (sum, count)
    let mut cells: BTreeMap<(TaskGroup, String, Dimension), (u64, usize)> = BTreeMap::new();
    let mut per_sample: BTreeMap<(usize, String, Dimension), (u64, usize)> = BTreeMap::new();
    let index: BTreeMap<&str, usize> = session
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id.as_str(), i))
        .collect();

    let groups: Vec<TaskGroup> = {
        let mut g: Vec<TaskGroup> = session.samples.iter().map(|s| s.task_group).collect();
        g.sort();
        g.dedup();
        g
    };
    for &g in &groups {
        for m in &session.models {
            for d in Dimension::ALL {
                cells.insert((g, m.clone(), d), (0, 0));
            }
        }
    }
    for r in &session.ratings {
        let s = index[r.sample_id.as_str()];
        let model = session.model_at(s, r.display_slot).to_string();
        let group = session.samples[s].task_group;
        for d in Dimension::ALL {
            let v = r.score(d) as u64;
            let c = cells.get_mut(&(group, model.clone(), d)).expect("cell exists");
            c.0 += v;
            c.1 += 1;
            let p = per_sample.entry((s, model.clone(), d)).or_insert((0, 0));
            p.0 += v;
            p.1 += 1;
        }
    }
    AggregateReport {
        session_id: session.id.clone(),
        complete: session.is_complete(),
        models: session.models.clone(),
        cells: cells
            .into_iter()
            .map(|((task_group, model, dimension), (sum, n))| AggregateCell {
                task_group,
                model,
                dimension,
                mean: (n > 0).then(|| sum as f64 / n as f64),
                n_ratings: n,
            })
            .collect(),
        per_sample: per_sample
            .into_iter()
            .map(|((s, model, dimension), (sum, n))| SampleScore {
                sample_id: session.samples[s].sample_id.clone(),
                task_group: session.samples[s].task_group,
                model,
                dimension,
                mean: sum as f64 / n as f64,
                n_raters: n,
            })
            .collect(),
    }
}

/// On-disk layout: `<root>/<session id>/session.json` holds the
/// definition, written once; `ratings.jsonl` is an append-only log.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.dir(id).join("session.json").exists()
    }

    pub fn create(&self, session: &EvalSession) -> Result<(), HumanEvalError> {
        let dir = self.dir(&session.id);
        if self.exists(&session.id) {
            return Err(HumanEvalError::SessionExists(session.id.clone()));
        }
        fs::create_dir_all(&dir).map_err(storage)?;
        let tmp = dir.join("session.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(session).map_err(storage)?).map_err(storage)?;
        fs::rename(&tmp, dir.join("session.json")).map_err(storage)?;
        File::create(dir.join("ratings.jsonl")).map_err(storage)?;
        for r in &session.ratings {
            self.append(r)?;
        }
        Ok(())
    }

    /// Appends one record as a single line and syncs it to disk.
    pub fn append(&self, record: &RatingRecord) -> Result<(), HumanEvalError> {
        let mut line = serde_json::to_string(record).map_err(storage)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.dir(&record.session_id).join("ratings.jsonl"))
            .map_err(storage)?;
        f.write_all(line.as_bytes()).map_err(storage)?;
        f.sync_data().map_err(storage)
    }

    /// Loads the definition and replays the log. A torn final line from an
    /// interrupted write is ignored.
    pub fn load(&self, id: &str) -> Result<EvalSession, HumanEvalError> {
        let dir = self.dir(id);
        let bytes = fs::read(dir.join("session.json")).map_err(|_| HumanEvalError::UnknownSession(id.to_string()))?;
        let mut session: EvalSession = serde_json::from_slice(&bytes).map_err(storage)?;
        let log = File::open(dir.join("ratings.jsonl")).map_err(storage)?;
        let lines: Vec<String> = BufReader::new(log).lines().collect::<Result<_, _>>().map_err(storage)?;
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RatingRecord>(line) {
                Ok(r) => session.apply(r)?,
                Err(_) if i == last => log::warn!("ignoring torn final line in {}", dir.display()),
                Err(e) => return Err(storage(format!("ratings.jsonl line {}: {e}", i + 1))),
            }
        }
        Ok(session)
    }

    pub fn list(&self) -> Result<Vec<String>, HumanEvalError> {
        let mut out = Vec::new();
        if !self.root.exists() {
            return Ok(out);
        }
        for e in fs::read_dir(&self.root).map_err(storage)? {
            let e = e.map_err(storage)?;
            if e.path().join("session.json").exists() {
                out.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
