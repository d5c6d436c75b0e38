//! Automatic metrics: ROUGE-L, accuracy and macro-F1, plus a client for
//! the external neural scorer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::extraction::ExtractedAnswer;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions but {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("gold label {0:?} is not one of A, B, C, D")]
    InvalidGold(String),
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest common subsequence, in O(|a|·|b|) time and
/// O(min) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

/// Sentence-level ROUGE-L with β = 1.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        };
    }
    let l = lcs_len(candidate, reference) as f64;
    let precision = l / candidate.len() as f64;
    let recall = l / reference.len() as f64;
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Letter {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" => Ok(Letter::A),
            "B" => Ok(Letter::B),
            "C" => Ok(Letter::C),
            "D" => Ok(Letter::D),
            other => Err(MetricsError::InvalidGold(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScore {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<Letter, ClassMetrics>,
    pub n_unparseable: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-F1 over the fixed label set A–D. Unparseable or
/// out-of-set predictions are wrong and belong to no predicted class.
pub fn classify_scores(predictions: &[ExtractedAnswer], golds: &[Letter]) -> Result<ClassificationScore, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let predicted: Vec<Option<Letter>> = predictions
        .iter()
        .map(|p| if p.is_unparseable() { None } else { p.value.parse().ok() })
        .collect();
    let n_unparseable = predicted.iter().filter(|p| p.is_none()).count();
    let correct = predicted.iter().zip(golds).filter(|(p, g)| **p == Some(**g)).count();

    let mut per_class = BTreeMap::new();
    for label in Letter::ALL {
        let tp = predicted.iter().zip(golds).filter(|(p, g)| **p == Some(label) && **g == label).count();
        let pred_pos = predicted.iter().filter(|p| **p == Some(label)).count();
        let gold_pos = golds.iter().filter(|g| **g == label).count();
        let precision = ratio(tp, pred_pos);
        let recall = ratio(tp, gold_pos);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.insert(label, ClassMetrics { precision, recall, f1 });
    }
    let macro_f1 = per_class.values().map(|m| m.f1).sum::<f64>() / Letter::ALL.len() as f64;
    Ok(ClassificationScore {
        accuracy: ratio(correct, golds.len()),
        macro_f1,
        per_class,
        n_unparseable,
    })
}

/// Per-instance correctness, for bootstrapping accuracy.
pub fn correctness(predictions: &[ExtractedAnswer], golds: &[Letter]) -> Result<Vec<f64>, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(golds)
        .map(|(p, g)| {
            let hit = !p.is_unparseable() && p.value.parse::<Letter>().ok() == Some(*g);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub candidate: String,
    pub reference: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralScores {
    pub bert_score: f64,
    pub bart_score: f64,
}

pub const SCORER_BATCH_LIMIT: usize = 64;

/// Client for the scorer sidecar: `POST {endpoint}/score` with a JSON
/// list of `{candidate, reference}`, answered by a list of
/// `{bert_score, bart_score}` in the same order.
#[derive(Debug, Clone)]
pub struct ScorerClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl ScorerClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, MetricsError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| MetricsError::ScorerUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn score(&self, pairs: &[ScorePair]) -> Result<Vec<NeuralScores>, MetricsError> {
        let url = format!("{}/score", self.endpoint);
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(SCORER_BATCH_LIMIT) {
            let resp = self
                .client
                .post(&url)
                .json(chunk)
                .send()
                .map_err(|e| MetricsError::ScorerUnavailable(e.to_string()))?;
            let status = resp.status();
            if status != reqwest::StatusCode::OK {
                return Err(MetricsError::ScorerUnavailable(format!("status {status}")));
            }
            let scores: Vec<NeuralScores> =
                resp.json().map_err(|e| MetricsError::ScorerUnavailable(format!("bad body: {e}")))?;
            if scores.len() != chunk.len() {
                return Err(MetricsError::ScorerUnavailable(format!(
                    "sent {} pairs, got {} scores",
                    chunk.len(),
                    scores.len()
                )));
            }
            if let Some(bad) = scores.iter().find(|s| s.bart_score > 0.0 || !(0.0..=1.0).contains(&s.bert_score)) {
                return Err(MetricsError::ScorerUnavailable(format!("score out of range: {bad:?}")));
            }
            out.extend(scores);
        }
        Ok(out)
    }
}
