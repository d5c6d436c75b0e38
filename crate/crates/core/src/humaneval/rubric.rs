use serde::{Deserialize, Serialize};

use super::Dimension;

pub const RUBRIC_VERSION: &str = "rubric/v1";

pub const SHUFFLE_NOTICE: &str = "Keep in mind that the order of the model outputs may be randomly shuffled, meaning that what's Model 1 in sample 1 could become Model 2 in sample 2 as an example.";

pub const SCALE_NOTICE: &str = "Rating ranges from 1 (bad) 2,3,4 to 5 (good):";

pub const ANNOTATION_PROMPT: &str =
    "Additional annotations: if the response contains false or misleading information, please identify them.";

const CORRECTNESS: [&str; 5] = [
    "1 (bad): The summary includes false or misleading information that is significantly different from the original article.",
    "2: Some elements of the summary contain correct information however the overall summary is inaccurate.",
    "3: The main point of the summary is correct, however it may include some inaccurate information from the original article.",
    "4: The summary mostly avoids inaccuracies, but may include minor inaccurate information from the original article.",
    "5 (good): The summary is accurate based on the original article.",
];

const COMPLETENESS: [&str; 5] = [
    "1 (bad): The summary is incomplete (missing key information), or leaves out crucial details.",
    "2: The summary is somewhat complete, but it lacks key information that impact its comprehensiveness.",
    "3: The summary is moderately complete, but certain details are missing, requiring enhancement.",
    "4: The summary is largely comprehensive, but a few minor details could be refined for better alignment with the original article.",
    "5 (good): The summary text is comprehensive and includes all relevant information.",
];

const READABILITY: [&str; 5] = [
    "1 (bad): The text is highly difficult to read, full of grammatical errors, and lacks coherence and clarity.",
    "2: The text is somewhat difficult to read, and there are occasional grammatical errors. The coherence and clarity could be improved.",
    "3: The text is moderately easy to read, but there are noticeable grammatical errors and some parts lack coherence and clarity.",
    "4: The text is fairly easy to read, with only a few minor grammatical errors. Overall coherence and clarity are good, but there is room for improvement.",
    "5 (good): The text is easy to read, well-structured, and flows naturally.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricDimension {
    pub dimension: Dimension,
    pub question: String,
    pub anchors: Vec<String>,
}

/// Rater guidance shipped with every blinded item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub version: String,
    pub notice: String,
    pub scale: String,
    pub dimensions: Vec<RubricDimension>,
    pub annotation_prompt: String,
}

impl Rubric {
    pub fn standard() -> Self {
        let dim = |dimension, question: &str, anchors: [&str; 5]| RubricDimension {
            dimension,
            question: question.to_string(),
            anchors: anchors.iter().map(|s| s.to_string()).collect(),
        };
        Rubric {
            version: RUBRIC_VERSION.into(),
            notice: SHUFFLE_NOTICE.into(),
            scale: SCALE_NOTICE.into(),
            dimensions: vec![
                dim(
                    Dimension::Correctness,
                    "Correctness of generated summaries: Does the summary contain correct information from the original article?",
                    CORRECTNESS,
                ),
                dim(
                    Dimension::Completeness,
                    "Completeness of generated summaries: Does the summary capture the key information from the original article?",
                    COMPLETENESS,
                ),
                dim(
                    Dimension::Readability,
                    "Readability of generated summaries: Is the summary easy to read?",
                    READABILITY,
                ),
            ],
            annotation_prompt: ANNOTATION_PROMPT.into(),
        }
    }
}
