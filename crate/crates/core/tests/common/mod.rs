//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use ophtha_bench::curation::templates::{payload, TaskKind, TemplateId};
use ophtha_bench::humaneval::{EvalSession, RatingSubmission, Sample, TaskGroup};
use ophtha_bench::metrics::{NeuralScores, ScorePair};
use serde_json::Value;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Longest common subsequence by trying every subsequence of the shorter
/// sequence, longest first.
pub fn brute_force_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let n = short.len();
    let mut best = 0;
    for mask in 0u32..(1u32 << n) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let picked: Vec<&T> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
        let mut it = long.iter();
        if picked.iter().all(|p| it.any(|x| x == *p)) {
            best = len;
        }
    }
    best
}

/// Two-sided exact rank-sum p by listing every way of choosing which of
/// the `n + m` ranks belong to the first sample.
pub fn enumerate_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let total = n + b.len();
    let mut all: Vec<(f64, usize)> = a.iter().map(|&x| (x, 0)).chain(b.iter().map(|&x| (x, 1))).collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let observed: usize = all.iter().enumerate().filter(|(_, (_, g))| *g == 0).map(|(i, _)| i + 1).sum();
    let expected = n as f64 * (total + 1) as f64 / 2.0;
    let dev = (observed as f64 - expected).abs();
    let (mut extreme, mut count) = (0u64, 0u64);
    for mask in 0u32..(1u32 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        count += 1;
        let w: usize = (0..total).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
        if (w as f64 - expected).abs() >= dev - 1e-9 {
            extreme += 1;
        }
    }
    (extreme as f64 / count as f64).min(1.0)
}

/// Per-class F1 from an explicit 4×5 confusion matrix (last column counts
/// unparseable predictions) and their unweighted mean.
pub fn confusion_macro_f1(golds: &[usize], preds: &[Option<usize>]) -> (f64, [f64; 4]) {
    let mut m = [[0usize; 5]; 4];
    for (g, p) in golds.iter().zip(preds) {
        m[*g][p.unwrap_or(4)] += 1;
    }
    let mut f1 = [0.0; 4];
    for c in 0..4 {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..4).map(|r| m[r][c]).sum();
        let actual: usize = m[c].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        f1[c] = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    (f1.iter().sum::<f64>() / 4.0, f1)
}

/// How the mock scorer answers.
#[derive(Debug, Clone, Copy)]
pub enum ScorerMode {
    Fixed(f64, f64),
    /// Word-overlap similarity; identical pairs score 1.
    Overlap,
    Status(u16),
    Truncate,
}

#[derive(Clone)]
struct ScorerState {
    mode: ScorerMode,
    batches: Arc<Mutex<Vec<usize>>>,
}

async fn score_handler(State(s): State<ScorerState>, Json(pairs): Json<Vec<ScorePair>>) -> (StatusCode, Json<Value>) {
    s.batches.lock().unwrap().push(pairs.len());
    if pairs.len() > 64 {
        return (
            StatusCode::BAD_REQUEST,
            Json(serde_json::json!({"error": "batch_too_large"})),
        );
    }
    let scores: Vec<NeuralScores> = match s.mode {
        ScorerMode::Status(code) => {
            return (
                StatusCode::from_u16(code).unwrap(),
                Json(serde_json::json!({"error": "unavailable"})),
            )
        }
        ScorerMode::Fixed(b, l) => pairs.iter().map(|_| NeuralScores { bert_score: b, bart_score: l }).collect(),
        ScorerMode::Truncate => pairs.iter().skip(1).map(|_| NeuralScores { bert_score: 0.5, bart_score: -1.0 }).collect(),
        ScorerMode::Overlap => pairs
            .iter()
            .map(|p| {
                let c: Vec<&str> = p.candidate.split_whitespace().collect();
                let r: Vec<&str> = p.reference.split_whitespace().collect();
                let common = c.iter().filter(|w| r.contains(w)).count() as f64;
                let sim = if c.is_empty() || r.is_empty() { 0.0 } else { common / c.len().max(r.len()) as f64 };
                NeuralScores { bert_score: sim, bart_score: sim - 1.0 }
            })
            .collect(),
    };
    (StatusCode::OK, Json(serde_json::to_value(scores).unwrap()))
}

pub struct MockServer {
    pub base_url: String,
    pub batches: Arc<Mutex<Vec<usize>>>,
    pub hits: Arc<AtomicUsize>,
    _runtime: tokio::runtime::Runtime,
}

fn spawn(router: Router, batches: Arc<Mutex<Vec<usize>>>, hits: Arc<AtomicUsize>) -> MockServer {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, router).await.unwrap() });
    MockServer {
        base_url: format!("http://{addr}"),
        batches,
        hits,
        _runtime: runtime,
    }
}

/// Scorer sidecar stand-in speaking the `/score` protocol.
pub fn scorer_server(mode: ScorerMode) -> MockServer {
    let batches = Arc::new(Mutex::new(Vec::new()));
    let state = ScorerState {
        mode,
        batches: batches.clone(),
    };
    let router = Router::new().route("/score", post(score_handler)).with_state(state);
    spawn(router, batches, Arc::new(AtomicUsize::new(0)))
}

/// Authorization header and JSON body of each request.
pub type SeenRequests = Arc<Mutex<Vec<(Option<String>, Value)>>>;

#[derive(Clone)]
struct ChatState {
    statuses: Arc<Mutex<Vec<u16>>>,
    hits: Arc<AtomicUsize>,
    seen: SeenRequests,
}

/// Chat-completions stand-in. Answers the scripted statuses in order, then
/// 200 with `"echo: " + last message content`.
pub struct ChatServer {
    pub server: MockServer,
    pub seen: SeenRequests,
}

pub fn chat_server(statuses: Vec<u16>) -> ChatServer {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let state = ChatState {
        statuses: Arc::new(Mutex::new(statuses.into_iter().rev().collect())),
        hits: hits.clone(),
        seen: seen.clone(),
    };
    async fn handler(
        State(s): State<ChatState>,
        headers: axum::http::HeaderMap,
        Json(body): Json<Value>,
    ) -> (StatusCode, Json<Value>) {
        s.hits.fetch_add(1, Ordering::SeqCst);
        let auth = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        s.seen.lock().unwrap().push((auth, body.clone()));
        if let Some(code) = s.statuses.lock().unwrap().pop() {
            if code != 200 {
                return (
                    StatusCode::from_u16(code).unwrap(),
                    Json(serde_json::json!({"error": code})),
                );
            }
        }
        let content = body["messages"][0]["content"].as_str().unwrap_or("").to_string();
        (
            StatusCode::OK,
            Json(serde_json::json!({"choices": [{"message": {"role": "assistant", "content": format!("echo: {content}")}}]})),
        )
    }
    let router = Router::new().route("/v1/chat/completions", post(handler)).with_state(state);
    ChatServer {
        server: spawn(router, Arc::new(Mutex::new(Vec::new())), hits),
        seen,
    }
}

pub fn sample(id: &str, group: TaskGroup, models: &[&str]) -> Sample {
    Sample {
        sample_id: id.to_string(),
        note_ref: format!("note-{id}"),
        note_text: format!("XXX presents with blurred vision ({id})."),
        task_group: group,
        responses: models
            .iter()
            .enumerate()
            .map(|(i, m)| (m.to_string(), format!("Answer text number {i} for {id}.")))
            .collect::<BTreeMap<_, _>>(),
    }
}

/// Display slot (1-based) showing `model` on sample `sample_index`.
pub fn slot_of(session: &EvalSession, sample_index: usize, model: &str) -> usize {
    (1..=session.models.len())
        .find(|&k| session.model_at(sample_index, k) == model)
        .expect("model is in the session")
}

pub fn submission(rater: &str, sample: &str, slot: usize, scores: [i64; 3]) -> RatingSubmission {
    RatingSubmission {
        rater_id: rater.to_string(),
        sample_id: sample.to_string(),
        display_slot: slot,
        correctness: scores[0],
        completeness: scores[1],
        readability: scores[2],
        note: None,
    }
}

/// `n` integer ratings whose sum is the nearest integer to `target * n`,
/// spread as evenly as possible.
pub fn ratings_for_mean(target: f64, n: usize) -> Vec<u8> {
    let total = (target * n as f64).round() as usize;
    let base = total / n;
    let extra = total % n;
    (0..n).map(|i| (base + usize::from(i < extra)) as u8).collect()
}

pub const CASE_LINE: &str = "Patient 6 was a 73-year-old male patient who had experienced diplopia and blepharoptosis for 1 month, with no headache, neck weakness, or other symptoms.";
pub const NOTE_LINE: &str = "Consultation requested by XXX at XXX for glaucoma evaluation";

/// Payload each golden template file was rendered from.
pub fn golden_payload(id: TemplateId) -> BTreeMap<String, String> {
    match id {
        TemplateId::Task(TaskKind::CaseQa(_)) => payload([("case_report", CASE_LINE)]),
        TemplateId::Task(TaskKind::AbstractCompletion) => payload([(
            "abstract",
            "Endothelin-1 (ET-1) is a potent vasoconstrictor peptide produced by vascular endothelial cells. ET-1 may have a role in the pathogenesis of various vascular diseases.",
        )]),
        TemplateId::Task(TaskKind::FillInBlank) => payload([(
            "question",
            "A macular sparing homonymous hemianopia is specific to a lesion in the ... lobe and is most likely caused by a stroke of the ... artery.",
        )]),
        TemplateId::Task(TaskKind::Mcq) => payload([
            (
                "question",
                "What receptor mediates the clinical effect of medications such as naphazoline and tetrahydrozoline?",
            ),
            ("option_a", "alpha-2"),
            ("option_b", "beta-1"),
            ("option_c", "beta-2"),
            ("option_d", "alpha-1"),
        ]),
        TemplateId::Task(TaskKind::ShortAnswerQa) => {
            payload([("question", "What are the 4 helminth worms that cause ocular disease?")])
        }
        TemplateId::LongFormQa => payload([(
            "question",
            "Does increased IOP cause the eyeball to feel hardened? If so, is a person able to tell if their IOP is high by how firm or soft their eyeball feels?",
        )]),
        TemplateId::EhrSummarization | TemplateId::ClinicalQa => payload([("note", NOTE_LINE)]),
    }
}
