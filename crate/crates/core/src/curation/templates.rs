//! Instruction template registry.
//!
//! Template strings are stored verbatim, wording and typos included, so
//! that curated data and evaluation prompts match the published formats
//! byte for byte. Placeholders use `{name}` syntax.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CurationError;

/// The fifteen curated case-report questions, in registry order.
pub const CASE_QUESTIONS: [&str; 15] = [
    "Please provide a summary of the following case report.",
    "What background information is provided for the case?",
    "What was the patient presentation?",
    "What was the work-up?",
    "What did the functional exam demonstrate?",
    "What did the slit lamp exam demonstrate?",
    "What imaging modalities, if any, were acquired?",
    "What did the imaging show?",
    "What did the labs show, if there were any acquired?",
    "What was the differential diagnosis, if there was one provided in the case?",
    "What treatment was provided to the patient?",
    "How did the patient respond to treatment?",
    "What was the outcome of the case?",
    "How is this case novel?",
    "What does this case teach us?",
];

const CASE_QA_TASK: &str =
    "The task is to answer a question or provide more information related to the ophthalmology case report that is given.";
const ABSTRACT_TASK: &str = "The task is to complete the ophthalmology related abstract which is provided. The output is the singular final sentence of the abstract which has been removed";
const FILL_IN_BLANK_TASK: &str = "The task is to fill in the missing word or words represented in each input by on or more \"...\". The output is the input with all instances of \"...\" filled in.";
const MCQ_TASK: &str =
    "Given a multiple-choice question in the field of ophthalmology, select the correct answer from the four options.";
const SHORT_ANSWER_TASK: &str = "Given a medical question in the field of ophthalmology, provide your answer to the question. Please provide only the answer without explanation.";
const LONG_FORM_TASK: &str = "The task is to answer the question which has been provided by a patient through an online forum where they can ask Ophthalmologists questions.";
const EHR_SUMMARY_TASK: &str = "One liners are often used as a standardized format for presenting a patients case, either before going into more detail during a presentation or as a quick refresher so everyone remembers the relevant history of the patient. Your task is to create a one line summary of the patients case in the following note. The format should be: *patient age* *patient gender* with a past medical history of *past medical history* presents today with *chief complaint* in the setting of *relevant history or concurrent symptoms.*";
const CLINICAL_QA_TASK: &str = "Your task is to provide answers to medical questions by analyzing clinical notes from actual patient cases. Given an ophthalmology note from an encounter with a patient in the ED or clinic, please answer the following clinical questions:
Question 1. What was the work-up?
Question 2. What did the slit lamp exam demonstrate?
Question 3. What treatment was provided to the patient?
Question 4. What is the expected clinical course of the patient following the outlined treatment?
The format of your response should be as follows:
Question 1: [Your answer]
Question 2: [Your answer]
Question 3: [Your answer]
Question 4: [Your answer]";

pub const MCQ_SUFFIX: &str = "Please answer with A, B, C, or D only.";
pub const BLANK_MARKER: &str = "...";

/// Index of a curated case question, 1..=15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaseQuestion(u8);

impl CaseQuestion {
    pub fn new(index: u8) -> Result<Self, CurationError> {
        if (1..=15).contains(&index) {
            Ok(Self(index))
        } else {
            Err(CurationError::InvalidCaseQuestion(index))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn text(self) -> &'static str {
        CASE_QUESTIONS[self.0 as usize - 1]
    }

    pub fn all() -> impl Iterator<Item = CaseQuestion> {
        (1..=15).map(CaseQuestion)
    }
}

/// The nineteen curated instruction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    CaseQa(CaseQuestion),
    AbstractCompletion,
    FillInBlank,
    Mcq,
    ShortAnswerQa,
}

impl TaskKind {
    pub fn all() -> Vec<TaskKind> {
        let mut v: Vec<TaskKind> = CaseQuestion::all().map(TaskKind::CaseQa).collect();
        v.extend([
            TaskKind::AbstractCompletion,
            TaskKind::FillInBlank,
            TaskKind::Mcq,
            TaskKind::ShortAnswerQa,
        ]);
        v
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::CaseQa(q) => write!(f, "case_qa_{:02}", q.0),
            TaskKind::AbstractCompletion => f.write_str("abstract_completion"),
            TaskKind::FillInBlank => f.write_str("fill_in_blank"),
            TaskKind::Mcq => f.write_str("mcq"),
            TaskKind::ShortAnswerQa => f.write_str("short_answer_qa"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abstract_completion" => Ok(TaskKind::AbstractCompletion),
            "fill_in_blank" => Ok(TaskKind::FillInBlank),
            "mcq" => Ok(TaskKind::Mcq),
            "short_answer_qa" => Ok(TaskKind::ShortAnswerQa),
            other => {
                let idx = other
                    .strip_prefix("case_qa_")
                    .and_then(|n| n.parse::<u8>().ok())
                    .ok_or_else(|| CurationError::UnknownTask(other.to_string()))?;
                Ok(TaskKind::CaseQa(CaseQuestion::new(idx)?))
            }
        }
    }
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every template in the registry: the nineteen curated tasks plus the
/// three formats used only for external evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    Task(TaskKind),
    LongFormQa,
    EhrSummarization,
    ClinicalQa,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateId::Task(t) => t.fmt(f),
            TemplateId::LongFormQa => f.write_str("long_form_qa"),
            TemplateId::EhrSummarization => f.write_str("ehr_summarization"),
            TemplateId::ClinicalQa => f.write_str("clinical_qa"),
        }
    }
}

impl From<TaskKind> for TemplateId {
    fn from(t: TaskKind) -> Self {
        TemplateId::Task(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: TemplateId,
    pub instruction: String,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub instruction: String,
    pub input: String,
}

#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<TemplateId, Template>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        let mut add = |id: TemplateId, instruction: &str, input: String| {
            templates.insert(
                id,
                Template {
                    id,
                    instruction: instruction.to_string(),
                    input,
                },
            );
        };
        for q in CaseQuestion::all() {
            add(
                TaskKind::CaseQa(q).into(),
                CASE_QA_TASK,
                format!("{{case_report}}\nQuestion: {}", q.text()),
            );
        }
        add(TaskKind::AbstractCompletion.into(), ABSTRACT_TASK, "{abstract}".into());
        add(TaskKind::FillInBlank.into(), FILL_IN_BLANK_TASK, "{question}".into());
        add(
            TaskKind::Mcq.into(),
            MCQ_TASK,
            format!("{{question}}\nA. {{option_a}}\nB. {{option_b}}\nC. {{option_c}}\nD. {{option_d}}\n{MCQ_SUFFIX}"),
        );
        add(TaskKind::ShortAnswerQa.into(), SHORT_ANSWER_TASK, "{question}".into());
        add(TemplateId::LongFormQa, LONG_FORM_TASK, "{question}".into());
        add(TemplateId::EhrSummarization, EHR_SUMMARY_TASK, "{note}".into());
        add(TemplateId::ClinicalQa, CLINICAL_QA_TASK, "{note}".into());
        Self { templates }
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        self.templates.get(&id).expect("registry covers every template id")
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    /// SHA-256 over every template, in id order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.templates.values() {
            h.update(t.id.to_string().as_bytes());
            h.update([0]);
            h.update(t.instruction.as_bytes());
            h.update([0]);
            h.update(t.input.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn render(
        &self,
        id: impl Into<TemplateId>,
        payload: &BTreeMap<String, String>,
    ) -> Result<Rendered, CurationError> {
        let t = self.get(id.into());
        Ok(Rendered {
            instruction: substitute(&t.instruction, payload)?,
            input: substitute(&t.input, payload)?,
        })
    }
}

/// Replaces `{name}` placeholders. Braces not forming a placeholder are
/// copied through unchanged.
fn substitute(template: &str, payload: &BTreeMap<String, String>) -> Result<String, CurationError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            let value = payload
                .get(name)
                .ok_or_else(|| CurationError::MissingPlaceholder(name.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders the function-call prompt sent to a model for one instance.
pub fn build_prompt(instruction: &str, input: &str) -> String {
    format!("Task: {instruction}\nInput: {input}\nOutput:")
}

/// Inverse of [`build_prompt`]: the input section of a prompt, if present.
pub fn prompt_input(prompt: &str) -> Option<&str> {
    let start = prompt.find("\nInput: ")? + "\nInput: ".len();
    let end = prompt.rfind("\nOutput:")?;
    (end >= start).then(|| &prompt[start..end])
}

/// Convenience for building payload maps.
pub fn payload<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
