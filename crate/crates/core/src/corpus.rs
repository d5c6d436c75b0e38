//! Corpus ingestion: case reports, journal abstracts and study items.
//!
//! Records arrive as JSONL, one per line. Each `ingest_*` function turns a
//! record stream into validated [`Document`]s and keeps an account of what
//! was skipped (filtered out) or rejected (malformed), so that
//! `emitted + skipped + rejected == input` always holds.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The fourteen journals whose abstracts make up the literature corpus,
/// with the publication counts collected from each.
pub const DEFAULT_JOURNALS: [(&str, usize); 14] = [
    ("Acta Ophthalmologica", 2_331),
    ("American Journal of Ophthalmology", 13_500),
    ("Asia-Pacific Journal of Ophthalmology", 739),
    ("British Journal of Ophthalmology", 11_288),
    ("Canadian Journal of Ophthalmology", 2_881),
    ("Eye", 6_910),
    ("Graefe's Archive for Clinical and Experimental Ophthalmology", 8_147),
    ("Investigative Ophthalmology and Visual Science", 22_749),
    ("JAMA Ophthalmology", 1_529),
    ("Journal of Cataract and Refractive Surgery", 9_100),
    ("Ophthalmology", 12_029),
    ("Ophthalmology Glaucoma", 341),
    ("Retina", 6_055),
    ("Survey of Ophthalmology", 2_408),
];

pub fn default_journal_whitelist() -> Vec<String> {
    DEFAULT_JOURNALS.iter().map(|(name, _)| name.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus store is corrupt: {0}")]
    CorruptStore(String),
}

/// Why a single record was rejected. Rejections are counted, never fatal.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("line {line}: unparseable record: {message}")]
    Unparseable { line: usize, message: String },
    #[error("record `{id}`: missing or empty field `{field}`")]
    MissingField { id: String, field: &'static str },
    #[error("record `{id}`: cloze spans overlap or are out of bounds")]
    InvalidClozeSpans { id: String },
    #[error("record `{id}`: more than four options")]
    TooManyOptions { id: String },
    #[error("record `{id}`: answer does not match exactly one option")]
    AnswerNotInOptions { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DocumentKind {
    CaseReport,
    Abstract,
    StudyItem,
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DocumentKind::CaseReport => "CaseReport",
            DocumentKind::Abstract => "Abstract",
            DocumentKind::StudyItem => "StudyItem",
        };
        f.write_str(s)
    }
}

/// Half-open character range `[start, end)` marking a blankable span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClozeSpan {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for ClozeSpan {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

/// Payload carried by documents of kind `StudyItem`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyItem {
    pub question_text: String,
    pub cloze_spans: Vec<ClozeSpan>,
    pub options: Vec<String>,
    pub answer: String,
}

impl StudyItem {
    /// Checks the span and option invariants.
    pub fn validate(&self) -> Result<(), &'static str> {
        let len = self.question_text.chars().count();
        let mut prev_end = 0;
        for (i, span) in self.cloze_spans.iter().enumerate() {
            if span.start >= span.end || span.end > len {
                return Err("span out of bounds");
            }
            if i > 0 && span.start < prev_end {
                return Err("spans overlap or are unsorted");
            }
            prev_end = span.end;
        }
        if self.options.len() > 4 {
            return Err("too many options");
        }
        if !self.options.is_empty()
            && self.options.iter().filter(|o| **o == self.answer).count() != 1
        {
            return Err("answer not among options");
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer");
        }
        Ok(())
    }

    /// Text of each cloze span, in order.
    pub fn span_texts(&self) -> Vec<String> {
        let chars: Vec<char> = self.question_text.chars().collect();
        self.cloze_spans
            .iter()
            .map(|s| chars[s.start..s.end].iter().collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub kind: DocumentKind,
    pub title: Option<String>,
    pub body: String,
    pub journal: Option<String>,
    pub source_ref: Option<String>,
    pub metadata: BTreeMap<String, String>,
    pub study_item: Option<StudyItem>,
}

/// One JSONL record, as read from input files and as written to the store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DocumentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cloze_spans: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl From<&Document> for RawRecord {
    fn from(doc: &Document) -> Self {
        let (question, answer, options, cloze_spans) = match &doc.study_item {
            Some(item) => (
                Some(item.question_text.clone()),
                Some(item.answer.clone()),
                item.options.clone(),
                item.cloze_spans.iter().map(|s| (s.start, s.end)).collect(),
            ),
            None => (None, None, Vec::new(), Vec::new()),
        };
        RawRecord {
            id: Some(doc.id.clone()),
            kind: Some(doc.kind),
            title: doc.title.clone(),
            body: Some(doc.body.clone()),
            journal: doc.journal.clone(),
            question,
            answer,
            options,
            cloze_spans,
            source_ref: doc.source_ref.clone(),
            metadata: doc.metadata.clone(),
        }
    }
}

/// Reads JSONL records. Blank lines are ignored; unparseable lines become
/// `RecordError::Unparseable` entries so the caller can count them.
pub fn read_records<R: BufRead>(reader: R) -> Vec<Result<RawRecord, RecordError>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.push(Err(RecordError::Unparseable {
                    line: idx + 1,
                    message: e.to_string(),
                }));
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str::<RawRecord>(&line).map_err(|e| RecordError::Unparseable {
                line: idx + 1,
                message: e.to_string(),
            }),
        );
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub documents: Vec<Document>,
    /// Well-formed records filtered out (e.g. journal not whitelisted).
    pub skipped: usize,
    /// Malformed or invalid records.
    pub rejected: usize,
    pub diagnostics: Vec<RecordError>,
}

impl IngestReport {
    pub fn total(&self) -> usize {
        self.documents.len() + self.skipped + self.rejected
    }

    fn reject(&mut self, err: RecordError) {
        warn!("{err}");
        self.rejected += 1;
        self.diagnostics.push(err);
    }
}

/// CRLF to LF, trailing spaces stripped per line, runs of blank lines
/// collapsed to one, leading/trailing blank lines dropped.
pub fn normalize_whitespace(text: &str) -> String {
    normalize_with_map(text).0
}

/// Normalizes like [`normalize_whitespace`] and also returns, for every
/// character boundary `0..=len` of the input, the corresponding boundary
/// in the output. Used to carry cloze spans through normalization.
fn normalize_with_map(text: &str) -> (String, Vec<usize>) {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut keep = vec![false; n];

    // Lines as (content start, content end, index of terminating break).
    // The CR of a CRLF pair belongs to the break; a lone CR is a break.
    let mut lines: Vec<(usize, usize, Option<usize>)> = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        match chars[i] {
            '\r' if i + 1 < n && chars[i + 1] == '\n' => {
                lines.push((start, i, Some(i + 1)));
                i += 2;
                start = i;
            }
            '\r' | '\n' => {
                lines.push((start, i, Some(i)));
                i += 1;
                start = i;
            }
            _ => i += 1,
        }
    }
    lines.push((start, n, None));

    let mut prev_break: Option<usize> = None;
    let mut blank_break: Option<usize> = None;
    for &(ls, le, brk) in &lines {
        let mut end = le;
        while end > ls && matches!(chars[end - 1], ' ' | '\t') {
            end -= 1;
        }
        if end == ls {
            if prev_break.is_some() && blank_break.is_none() {
                blank_break = brk;
            }
            continue;
        }
        if let Some(b) = prev_break {
            keep[b] = true;
            if let Some(bb) = blank_break {
                keep[bb] = true;
            }
        }
        keep[ls..end].iter_mut().for_each(|k| *k = true);
        prev_break = brk;
        blank_break = None;
    }

    let mut out = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(n + 1);
    let mut count = 0;
    for i in 0..n {
        map.push(count);
        if keep[i] {
            out.push(if chars[i] == '\r' { '\n' } else { chars[i] });
            count += 1;
        }
    }
    map.push(count);
    (out, map)
}

fn normalize_journal(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn non_empty(value: &Option<String>) -> Option<&str> {
    value.as_deref().filter(|s| !s.trim().is_empty())
}

fn required_id(rec: &RawRecord) -> Result<String, RecordError> {
    non_empty(&rec.id)
        .map(|s| s.trim().to_string())
        .ok_or(RecordError::MissingField {
            id: "<unknown>".into(),
            field: "id",
        })
}

struct IdGuard(HashSet<String>);

impl IdGuard {
    fn new() -> Self {
        Self(HashSet::new())
    }

    fn claim(&mut self, id: &str) -> Result<(), CorpusError> {
        if !self.0.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId(id.to_string()));
        }
        Ok(())
    }
}

/// Ingests journal abstracts, keeping those whose journal is on the
/// whitelist. Matching is case-insensitive after whitespace collapse; the
/// stored journal name is the canonical whitelist spelling.
pub fn ingest_abstracts<I>(source: I, journal_whitelist: &[String]) -> Result<IngestReport, CorpusError>
where
    I: IntoIterator<Item = Result<RawRecord, RecordError>>,
{
    let whitelist: BTreeMap<String, &String> = journal_whitelist
        .iter()
        .map(|j| (normalize_journal(j), j))
        .collect();
    let mut report = IngestReport::default();
    let mut ids = IdGuard::new();

    for rec in source {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        let id = match required_id(&rec) {
            Ok(id) => id,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        let body = rec.body.as_deref().map(normalize_whitespace).unwrap_or_default();
        if body.is_empty() {
            report.reject(RecordError::MissingField { id, field: "body" });
            continue;
        }
        let Some(journal) = non_empty(&rec.journal) else {
            report.reject(RecordError::MissingField { id, field: "journal" });
            continue;
        };
        let Some(canonical) = whitelist.get(&normalize_journal(journal)) else {
            report.skipped += 1;
            continue;
        };
        ids.claim(&id)?;
        report.documents.push(Document {
            id,
            kind: DocumentKind::Abstract,
            title: rec.title.as_deref().map(normalize_whitespace),
            body,
            journal: Some((*canonical).clone()),
            source_ref: rec.source_ref.clone(),
            metadata: rec.metadata.clone(),
            study_item: None,
        });
    }
    Ok(report)
}

pub fn ingest_case_reports<I>(source: I) -> Result<IngestReport, CorpusError>
where
    I: IntoIterator<Item = Result<RawRecord, RecordError>>,
{
    let mut report = IngestReport::default();
    let mut ids = IdGuard::new();
    for rec in source {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        let id = match required_id(&rec) {
            Ok(id) => id,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        let body = rec.body.as_deref().map(normalize_whitespace).unwrap_or_default();
        if body.is_empty() {
            report.reject(RecordError::MissingField { id, field: "body" });
            continue;
        }
        ids.claim(&id)?;
        report.documents.push(Document {
            id,
            kind: DocumentKind::CaseReport,
            title: rec.title.as_deref().map(normalize_whitespace),
            body,
            journal: non_empty(&rec.journal).map(str::to_string),
            source_ref: rec.source_ref.clone(),
            metadata: rec.metadata.clone(),
            study_item: None,
        });
    }
    Ok(report)
}

fn build_study_item(id: &str, rec: &RawRecord) -> Result<StudyItem, RecordError> {
    let raw_question = non_empty(&rec.question)
        .or_else(|| non_empty(&rec.body))
        .ok_or(RecordError::MissingField {
            id: id.to_string(),
            field: "question",
        })?;
    let answer = non_empty(&rec.answer)
        .ok_or(RecordError::MissingField {
            id: id.to_string(),
            field: "answer",
        })?
        .trim()
        .to_string();

    let raw_len = raw_question.chars().count();
    let mut spans: Vec<ClozeSpan> = rec.cloze_spans.iter().copied().map(ClozeSpan::from).collect();
    spans.sort();
    let invalid = || RecordError::InvalidClozeSpans { id: id.to_string() };
    let mut prev_end = 0;
    for s in &spans {
        if s.start >= s.end || s.end > raw_len || s.start < prev_end {
            return Err(invalid());
        }
        prev_end = s.end;
    }

    let (question_text, map) = normalize_with_map(raw_question);
    let mut mapped = Vec::with_capacity(spans.len());
    for s in spans {
        let m = ClozeSpan {
            start: map[s.start],
            end: map[s.end],
        };
        if m.start >= m.end {
            return Err(invalid());
        }
        mapped.push(m);
    }

    if rec.options.len() > 4 {
        return Err(RecordError::TooManyOptions { id: id.to_string() });
    }
    let options: Vec<String> = rec.options.iter().map(|o| o.trim().to_string()).collect();
    let item = StudyItem {
        question_text,
        cloze_spans: mapped,
        options,
        answer,
    };
    match item.validate() {
        Ok(()) => Ok(item),
        Err("answer not among options") => Err(RecordError::AnswerNotInOptions { id: id.to_string() }),
        Err("empty answer") => Err(RecordError::MissingField {
            id: id.to_string(),
            field: "answer",
        }),
        Err(_) => Err(invalid()),
    }
}

/// Ingests study questions. Cloze spans are character offsets into the
/// question as given and are carried through whitespace normalization.
pub fn ingest_study_items<I>(source: I) -> Result<IngestReport, CorpusError>
where
    I: IntoIterator<Item = Result<RawRecord, RecordError>>,
{
    let mut report = IngestReport::default();
    let mut ids = IdGuard::new();
    for rec in source {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        let id = match required_id(&rec) {
            Ok(id) => id,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        let item = match build_study_item(&id, &rec) {
            Ok(item) => item,
            Err(e) => {
                report.reject(e);
                continue;
            }
        };
        ids.claim(&id)?;
        report.documents.push(Document {
            id,
            kind: DocumentKind::StudyItem,
            title: non_empty(&rec.title).map(normalize_whitespace),
            body: item.question_text.clone(),
            journal: None,
            source_ref: rec.source_ref.clone(),
            metadata: rec.metadata.clone(),
            study_item: Some(item),
        });
    }
    Ok(report)
}

/// An in-memory corpus with unique ids across all document kinds.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    documents: Vec<Document>,
    ids: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format: String,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
    /// SHA-256 over the record lines, each terminated by `\n`.
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: StoreHeader,
}

pub const STORE_FORMAT: &str = "corpus-store/v1";

impl CorpusStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: Document) -> Result<(), CorpusError> {
        if !self.ids.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        self.documents.push(doc);
        Ok(())
    }

    pub fn extend(&mut self, docs: impl IntoIterator<Item = Document>) -> Result<(), CorpusError> {
        for d in docs {
            self.insert(d)?;
        }
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn of_kind(&self, kind: DocumentKind) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    fn record_lines(&self) -> Vec<String> {
        self.documents
            .iter()
            .map(|d| serde_json::to_string(&RawRecord::from(d)).expect("record serializes"))
            .collect()
    }

    pub fn header(&self) -> StoreHeader {
        let lines = self.record_lines();
        let mut counts = BTreeMap::new();
        for d in &self.documents {
            *counts.entry(d.kind.to_string()).or_insert(0) += 1;
        }
        StoreHeader {
            format: STORE_FORMAT.to_string(),
            counts,
            total: self.documents.len(),
            digest: digest_lines(&lines),
        }
    }

    /// Writes the header line followed by one record per line.
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        let lines = self.record_lines();
        let header = HeaderLine { header: self.header() };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for l in lines {
            writeln!(out, "{l}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a store written by [`CorpusStore::write`], verifying counts and digest.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| CorpusError::CorruptStore("empty file".into()))??;
        let header: HeaderLine = serde_json::from_str(&first)
            .map_err(|e| CorpusError::CorruptStore(format!("bad header: {e}")))?;
        if header.header.format != STORE_FORMAT {
            return Err(CorpusError::CorruptStore(format!(
                "unsupported format `{}`",
                header.header.format
            )));
        }
        let mut store = CorpusStore::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: RawRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::CorruptStore(format!("record {}: {e}", i + 1)))?;
            store.insert(document_from_store_record(rec)?)?;
        }
        let check = store.header();
        if check != header.header {
            return Err(CorpusError::CorruptStore("header does not match contents".into()));
        }
        Ok(store)
    }
}

fn document_from_store_record(rec: RawRecord) -> Result<Document, CorpusError> {
    let corrupt = |m: &str| CorpusError::CorruptStore(m.to_string());
    let id = rec.id.clone().ok_or_else(|| corrupt("record without id"))?;
    let kind = rec.kind.ok_or_else(|| corrupt("record without kind"))?;
    let study_item = if kind == DocumentKind::StudyItem {
        let item = StudyItem {
            question_text: rec.question.clone().ok_or_else(|| corrupt("study item without question"))?,
            cloze_spans: rec.cloze_spans.iter().copied().map(ClozeSpan::from).collect(),
            options: rec.options.clone(),
            answer: rec.answer.clone().ok_or_else(|| corrupt("study item without answer"))?,
        };
        item.validate().map_err(corrupt)?;
        Some(item)
    } else {
        None
    };
    Ok(Document {
        id,
        kind,
        title: rec.title,
        body: rec.body.ok_or_else(|| corrupt("record without body"))?,
        journal: rec.journal,
        source_ref: rec.source_ref,
        metadata: rec.metadata,
        study_item,
    })
}

pub(crate) fn digest_lines(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
