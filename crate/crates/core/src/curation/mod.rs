//! Turning corpus documents into instruction instances.

pub mod templates;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DocumentKind};
use crate::gateway::{Completer, GatewayError};
use crate::util::parallel_map;
use templates::{build_prompt, payload, CaseQuestion, TaskKind, TemplateRegistry, BLANK_MARKER};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurationError {
    #[error("template placeholder {{{0}}} has no value")]
    MissingPlaceholder(String),
    #[error("abstract {0} has fewer than two sentences")]
    SingleSentenceAbstract(String),
    #[error("weak-label backend returned an empty completion for {0}")]
    EmptyWeakLabel(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("study item {0} has no cloze spans")]
    MissingClozeSpans(String),
    #[error("study item {id} has {count} options, expected 4")]
    WrongOptionCount { id: String, count: usize },
    #[error("study item {0}: blanks cannot be located unambiguously")]
    AmbiguousBlank(String),
    #[error("document {id} is a {found}, expected {expected}")]
    WrongDocumentKind {
        id: String,
        expected: DocumentKind,
        found: DocumentKind,
    },
    #[error("case question index {0} outside 1..=15")]
    InvalidCaseQuestion(u8),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("nothing to split")]
    EmptyInput,
    #[error("duplicate id {0}")]
    DuplicateIds(String),
    #[error("instance {id} violates an invariant: {reason}")]
    InvalidInstance { id: String, reason: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    GoldFromCorpus,
    WeakLabel { model_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionInstance {
    pub id: String,
    pub task: TaskKind,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub source_doc: String,
    pub provenance: Provenance,
}

impl InstructionInstance {
    pub fn validate(&self, registry: &TemplateRegistry) -> Result<(), CurationError> {
        let fail = |reason: &str| {
            Err(CurationError::InvalidInstance {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.instruction != registry.get(self.task.into()).instruction {
            return fail("instruction differs from the registered template");
        }
        if self.output.trim().is_empty() {
            return fail("empty output");
        }
        match self.task {
            TaskKind::Mcq => {
                let labelled = ["A. ", "B. ", "C. ", "D. "]
                    .iter()
                    .filter(|l| self.input.lines().filter(|line| line.starts_with(*l)).count() == 1)
                    .count();
                if labelled != 4 {
                    return fail("multiple-choice input must list options A. to D. once each");
                }
                if !["A", "B", "C", "D"].contains(&self.output.as_str()) {
                    return fail("multiple-choice output must be a single letter A-D");
                }
            }
            TaskKind::FillInBlank => {
                if !self.input.contains(BLANK_MARKER) {
                    return fail("fill-in-blank input has no blank marker");
                }
                if self.output.contains(BLANK_MARKER) {
                    return fail("fill-in-blank output contains a blank marker");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

const ABBREVIATIONS: &[&str] = &[
    "vs", "al", "dr", "fig", "figs", "e.g", "i.e", "no", "mr", "mrs", "ms", "prof", "st", "jr", "eq", "cf", "ca",
    "approx", "etc",
];

/// Splits text into sentences. A boundary is a `.`, `!` or `?` (plus any
/// closing quotes or brackets) followed by whitespace and then an
/// uppercase letter or digit, unless the period ends a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                j += 1;
            }
            let ws_start = j;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let next_ok = j < chars.len() && (chars[j].1.is_uppercase() || chars[j].1.is_ascii_digit());
            if j > ws_start && next_ok && !(c == '.' && ends_with_abbreviation(&text[start..pos])) {
                let end = if ws_start < chars.len() { chars[ws_start].0 } else { text.len() };
                out.push(text[start..end].trim());
                start = chars[j].0;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out.retain(|s| !s.is_empty());
    out
}

fn ends_with_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

fn expect_kind(doc: &Document, expected: DocumentKind) -> Result<(), CurationError> {
    if doc.kind == expected {
        Ok(())
    } else {
        Err(CurationError::WrongDocumentKind {
            id: doc.id.clone(),
            expected,
            found: doc.kind,
        })
    }
}

fn instance_id(doc: &Document, task: TaskKind) -> String {
    format!("{}:{}", doc.id, task)
}

/// Withholds the final sentence of an abstract as the target.
pub fn make_abstract_completion(
    doc: &Document,
    registry: &TemplateRegistry,
) -> Result<InstructionInstance, CurationError> {
    expect_kind(doc, DocumentKind::Abstract)?;
    let sentences = split_sentences(&doc.body);
    if sentences.len() < 2 {
        return Err(CurationError::SingleSentenceAbstract(doc.id.clone()));
    }
    let last = sentences[sentences.len() - 1];
    let last_start = doc.body.rfind(last).expect("sentence is a slice of the body");
    let head = doc.body[..last_start].trim_end();
    let task = TaskKind::AbstractCompletion;
    let rendered = registry.render(task, &payload([("abstract", head)]))?;
    Ok(InstructionInstance {
        id: instance_id(doc, task),
        task,
        instruction: rendered.instruction,
        input: rendered.input,
        output: last.to_string(),
        source_doc: doc.id.clone(),
        provenance: Provenance::GoldFromCorpus,
    })
}

/// Asks the weak-label backend one curated question about a case report.
pub fn make_case_qa(
    doc: &Document,
    question: CaseQuestion,
    client: &dyn Completer,
    registry: &TemplateRegistry,
) -> Result<InstructionInstance, CurationError> {
    expect_kind(doc, DocumentKind::CaseReport)?;
    let task = TaskKind::CaseQa(question);
    let rendered = registry.render(task, &payload([("case_report", doc.body.as_str())]))?;
    let id = instance_id(doc, task);
    let text = client.complete_text(&build_prompt(&rendered.instruction, &rendered.input))?;
    let output = text.trim();
    if output.is_empty() {
        return Err(CurationError::EmptyWeakLabel(id));
    }
    Ok(InstructionInstance {
        id,
        task,
        instruction: rendered.instruction,
        input: rendered.input,
        output: output.to_string(),
        source_doc: doc.id.clone(),
        provenance: Provenance::WeakLabel {
            model_id: client.model_id().to_string(),
        },
    })
}

/// Runs [`make_case_qa`] for every (document, question) pair with at most
/// `jobs` concurrent backend calls. Results are ordered by document id and
/// then question index.
pub fn make_case_qa_batch(
    docs: &[Document],
    questions: &[CaseQuestion],
    client: &dyn Completer,
    registry: &TemplateRegistry,
    jobs: usize,
) -> Vec<Result<InstructionInstance, CurationError>> {
    let mut sorted: Vec<&Document> = docs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut qs = questions.to_vec();
    qs.sort();
    let pairs: Vec<(&Document, CaseQuestion)> = sorted
        .iter()
        .flat_map(|d| qs.iter().map(move |q| (*d, *q)))
        .collect();
    parallel_map(&pairs, jobs, |(d, q)| make_case_qa(d, *q, client, registry))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeStyle {
    FillInBlank,
    Mcq,
    ShortAnswerQa,
}

impl KnowledgeStyle {
    /// The richest style an item supports: multiple choice when it has four
    /// options, fill-in-blank when it has cloze spans, else short answer.
    pub fn for_document(doc: &Document) -> Option<Self> {
        let item = doc.study_item.as_ref()?;
        Some(if item.options.len() == 4 {
            KnowledgeStyle::Mcq
        } else if !item.cloze_spans.is_empty() {
            KnowledgeStyle::FillInBlank
        } else {
            KnowledgeStyle::ShortAnswerQa
        })
    }

    pub fn task(self) -> TaskKind {
        match self {
            KnowledgeStyle::FillInBlank => TaskKind::FillInBlank,
            KnowledgeStyle::Mcq => TaskKind::Mcq,
            KnowledgeStyle::ShortAnswerQa => TaskKind::ShortAnswerQa,
        }
    }
}

/// Replaces each span with the blank marker.
pub fn blank_out(text: &str, spans: &[crate::corpus::ClozeSpan]) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for s in spans {
        out.extend(&chars[cursor..s.start]);
        out.push_str(BLANK_MARKER);
        cursor = s.end;
    }
    out.extend(&chars[cursor..]);
    out
}

/// Fills blank markers left to right with `fills`. Returns `None` when the
/// number of markers differs from the number of fills.
pub fn fill_blanks(blanked: &str, fills: &[String]) -> Option<String> {
    let pieces: Vec<&str> = blanked.split(BLANK_MARKER).collect();
    if pieces.len() != fills.len() + 1 {
        return None;
    }
    let mut out = pieces[0].to_string();
    for (fill, piece) in fills.iter().zip(&pieces[1..]) {
        out.push_str(fill);
        out.push_str(piece);
    }
    Some(out)
}

/// Recasts a study item as a fill-in-blank, multiple-choice or
/// short-answer instance.
pub fn make_knowledge_qa(
    doc: &Document,
    style: KnowledgeStyle,
    registry: &TemplateRegistry,
) -> Result<InstructionInstance, CurationError> {
    expect_kind(doc, DocumentKind::StudyItem)?;
    let item = doc
        .study_item
        .as_ref()
        .ok_or_else(|| CurationError::MissingClozeSpans(doc.id.clone()))?;
    let task = style.task();
    let (rendered, output) = match style {
        KnowledgeStyle::FillInBlank => {
            if item.cloze_spans.is_empty() {
                return Err(CurationError::MissingClozeSpans(doc.id.clone()));
            }
            let blanked = blank_out(&item.question_text, &item.cloze_spans);
            let round_trip = fill_blanks(&blanked, &item.span_texts());
            if round_trip.as_deref() != Some(item.question_text.as_str())
                || item.question_text.contains(BLANK_MARKER)
            {
                return Err(CurationError::AmbiguousBlank(doc.id.clone()));
            }
            let r = registry.render(task, &payload([("question", blanked.as_str())]))?;
            (r, item.question_text.clone())
        }
        KnowledgeStyle::Mcq => {
            if item.options.len() != 4 {
                return Err(CurationError::WrongOptionCount {
                    id: doc.id.clone(),
                    count: item.options.len(),
                });
            }
            let letter = item
                .options
                .iter()
                .position(|o| *o == item.answer)
                .map(|i| ["A", "B", "C", "D"][i])
                .ok_or_else(|| CurationError::InvalidInstance {
                    id: doc.id.clone(),
                    reason: "answer is not one of the options".into(),
                })?;
            let o = &item.options;
            let r = registry.render(
                task,
                &payload([
                    ("question", item.question_text.as_str()),
                    ("option_a", o[0].as_str()),
                    ("option_b", o[1].as_str()),
                    ("option_c", o[2].as_str()),
                    ("option_d", o[3].as_str()),
                ]),
            )?;
            (r, letter.to_string())
        }
        KnowledgeStyle::ShortAnswerQa => {
            let r = registry.render(task, &payload([("question", item.question_text.as_str())]))?;
            (r, item.answer.clone())
        }
    };
    Ok(InstructionInstance {
        id: instance_id(doc, task),
        task,
        instruction: rendered.instruction,
        input: rendered.input,
        output,
        source_doc: doc.id.clone(),
        provenance: Provenance::GoldFromCorpus,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Seeded shuffle, then the first `floor(0.9 N)` ids go to training.
pub fn split_train_val(ids: &[String], seed: u64) -> Result<SplitResult, CurationError> {
    if ids.is_empty() {
        return Err(CurationError::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(CurationError::DuplicateIds(id.clone()));
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ids.len() * 9 / 10;
    let validation = shuffled.split_off(n_train);
    Ok(SplitResult {
        seed,
        train: shuffled,
        validation,
    })
}

pub fn write_instances<W: Write>(mut out: W, instances: &[InstructionInstance]) -> Result<(), CurationError> {
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| CurationError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| CurationError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(reader: R) -> Result<Vec<InstructionInstance>, CurationError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CurationError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CurationError::Io(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Count of instances per task.
pub fn task_counts(instances: &[InstructionInstance]) -> BTreeMap<TaskKind, usize> {
    let mut m = BTreeMap::new();
    for i in instances {
        *m.entry(i.task).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClozeSpan, StudyItem};

    fn doc(kind: DocumentKind, id: &str, body: &str) -> Document {
        Document {
            id: id.into(),
            kind,
            title: None,
            body: body.into(),
            journal: None,
            source_ref: None,
            metadata: BTreeMap::new(),
            study_item: None,
        }
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("A. B. C."), vec!["A.", "B.", "C."]);
        assert_eq!(
            split_sentences("Compared with placebo vs. Drug X it worked. Smith et al. Reported it."),
            vec!["Compared with placebo vs. Drug X it worked.", "Smith et al. Reported it."]
        );
        assert_eq!(split_sentences("Ends here? 5 more were seen."), vec!["Ends here?", "5 more were seen."]);
        assert_eq!(split_sentences("value 3.5 mm. lower case next"), vec!["value 3.5 mm. lower case next"]);
        assert_eq!(split_sentences("He said \"stop.\" Then left."), vec!["He said \"stop.\"", "Then left."]);
    }

    #[test]
    fn abstract_completion_trivial() {
        let reg = TemplateRegistry::builtin();
        let inst = make_abstract_completion(&doc(DocumentKind::Abstract, "p1", "A. B. C."), &reg).unwrap();
        assert_eq!(inst.input, "A. B.");
        assert_eq!(inst.output, "C.");
        assert_eq!(inst.task, TaskKind::AbstractCompletion);
        inst.validate(&reg).unwrap();
        assert!(matches!(
            make_abstract_completion(&doc(DocumentKind::Abstract, "p2", "Only one sentence."), &reg),
            Err(CurationError::SingleSentenceAbstract(_))
        ));
    }

    #[test]
    fn knowledge_styles() {
        let reg = TemplateRegistry::builtin();
        let mut d = doc(DocumentKind::StudyItem, "s1", "Q?");
        d.study_item = Some(StudyItem {
            question_text: "Q?".into(),
            cloze_spans: vec![],
            options: vec!["w".into(), "x".into(), "y".into(), "z".into()],
            answer: "z".into(),
        });
        let mcq = make_knowledge_qa(&d, KnowledgeStyle::Mcq, &reg).unwrap();
        assert_eq!(mcq.output, "D");
        mcq.validate(&reg).unwrap();
        assert!(matches!(
            make_knowledge_qa(&d, KnowledgeStyle::FillInBlank, &reg),
            Err(CurationError::MissingClozeSpans(_))
        ));
        d.study_item.as_mut().unwrap().options.pop();
        assert!(matches!(
            make_knowledge_qa(&d, KnowledgeStyle::Mcq, &reg),
            Err(CurationError::WrongOptionCount { count: 3, .. })
        ));
    }

    #[test]
    fn preexisting_marker_is_ambiguous() {
        let reg = TemplateRegistry::builtin();
        let mut d = doc(DocumentKind::StudyItem, "s2", "");
        d.study_item = Some(StudyItem {
            question_text: "wait... the cornea".into(),
            cloze_spans: vec![ClozeSpan { start: 12, end: 18 }],
            options: vec![],
            answer: "cornea".into(),
        });
        assert!(matches!(
            make_knowledge_qa(&d, KnowledgeStyle::FillInBlank, &reg),
            Err(CurationError::AmbiguousBlank(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let s = split_train_val(&ids, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (9, 1));
        assert_eq!(s, split_train_val(&ids, 7).unwrap());
        assert!(matches!(split_train_val(&[], 1), Err(CurationError::EmptyInput)));
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(split_train_val(&dup, 1), Err(CurationError::DuplicateIds(_))));
    }

    #[test]
    fn wrong_kind_rejected() {
        let reg = TemplateRegistry::builtin();
        assert!(matches!(
            make_abstract_completion(&doc(DocumentKind::CaseReport, "c", "A. B."), &reg),
            Err(CurationError::WrongDocumentKind { .. })
        ));
    }
}
