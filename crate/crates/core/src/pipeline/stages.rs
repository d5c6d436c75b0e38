use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::artifacts as a;
use super::{io_err, PipelineError, RunConfig, RunOptions, Stage};
use crate::corpus::{self, CorpusStore, DocumentKind};
use crate::curation::templates::{build_prompt, payload, CaseQuestion, TaskKind, TemplateId, TemplateRegistry};
use crate::curation::{self, InstructionInstance, KnowledgeStyle, SplitResult};
use crate::extraction::{extract, AnswerKind, ExtractedAnswer, LETTERS};
use crate::gateway::{LlmClient, ResponseCache};
use crate::humaneval::SessionStore;
use crate::metrics::{self, Letter, ScorePair, ScorerClient};
use crate::report::{self, TableRow, ValidationGroup};
use crate::stats::{self, ComparisonRow, ModelComparison};
use crate::util::derive_seed;

pub(super) struct StageInputs {
    pub required: Vec<PathBuf>,
    pub optional: Vec<PathBuf>,
}

pub(super) fn inputs(cfg: &RunConfig, stage: Stage) -> StageInputs {
    let out = cfg.out_dir();
    let o = |name: &str| out.join(name);
    let mut optional = Vec::new();
    let required = match stage {
        Stage::Ingest => [&cfg.corpus.abstracts, &cfg.corpus.case_reports, &cfg.corpus.study_items]
            .into_iter()
            .flatten()
            .map(|p| cfg.resolve(p))
            .collect(),
        Stage::Curate => vec![o(a::CORPUS)],
        Stage::Split => vec![o(a::INSTRUCTIONS)],
        Stage::Infer => {
            let mut v = vec![o(a::INSTRUCTIONS), o(a::SPLIT)];
            v.extend(
                [&cfg.evaluation.external_long_form, &cfg.evaluation.external_mcq]
                    .into_iter()
                    .flatten()
                    .map(|p| cfg.resolve(p)),
            );
            v.extend(cfg.imported.iter().map(|m| cfg.resolve(&m.responses)));
            v
        }
        Stage::Extract => vec![o(a::EVAL_ITEMS), o(a::RESPONSES)],
        Stage::Score => vec![o(a::EVAL_ITEMS), o(a::EXTRACTED)],
        Stage::Compare => vec![o(a::SCORES)],
        Stage::Report => {
            if let Some(h) = &cfg.humaneval {
                let dir = cfg.resolve(&h.store_dir).join(&h.session_id);
                optional.push(dir.join("session.json"));
                optional.push(dir.join("ratings.jsonl"));
            }
            optional.push(o(a::NEURAL));
            vec![o(a::COMPARISONS), o(a::CLASSIFICATION)]
        }
    };
    StageInputs { required, optional }
}

pub(super) fn run(
    cfg: &RunConfig,
    stage: Stage,
    opts: RunOptions,
    registry: &TemplateRegistry,
) -> Result<Vec<PathBuf>, PipelineError> {
    match stage {
        Stage::Ingest => ingest(cfg),
        Stage::Curate => curate(cfg, opts, registry),
        Stage::Split => split(cfg),
        Stage::Infer => infer(cfg, opts, registry),
        Stage::Extract => extract_stage(cfg),
        Stage::Score => score(cfg),
        Stage::Compare => compare(cfg),
        Stage::Report => report_stage(cfg),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::failed(stage, format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("row serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::failed(stage, format!("{}: {e}", path.display())))
}

fn ingest(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Ingest;
    let journals = cfg.corpus.journals.clone().unwrap_or_else(corpus::default_journal_whitelist);
    let mut store = CorpusStore::new();
    let mut summary = BTreeMap::new();
    let sources = [
        (DocumentKind::Abstract, &cfg.corpus.abstracts),
        (DocumentKind::CaseReport, &cfg.corpus.case_reports),
        (DocumentKind::StudyItem, &cfg.corpus.study_items),
    ];
    for (kind, path) in sources {
        let Some(path) = path else { continue };
        let path = cfg.resolve(path);
        let records = corpus::read_records(open(&path)?);
        let report = match kind {
            DocumentKind::Abstract => corpus::ingest_abstracts(records, &journals),
            DocumentKind::CaseReport => corpus::ingest_case_reports(records),
            DocumentKind::StudyItem => corpus::ingest_study_items(records),
        }
        .map_err(|e| PipelineError::failed(st, e))?;
        log::info!(
            "{kind}: {} accepted, {} skipped, {} rejected",
            report.documents.len(),
            report.skipped,
            report.rejected
        );
        summary.insert(
            kind.to_string(),
            json!({
                "accepted": report.documents.len(),
                "skipped": report.skipped,
                "rejected": report.rejected,
                "diagnostics": report.diagnostics.iter().map(ToString::to_string).collect::<Vec<_>>(),
            }),
        );
        store.extend(report.documents).map_err(|e| PipelineError::failed(st, e))?;
    }
    let out = cfg.out_dir();
    let corpus_path = out.join(a::CORPUS);
    let mut w = BufWriter::new(File::create(&corpus_path).map_err(io_err(&corpus_path))?);
    store.write(&mut w).map_err(|e| PipelineError::failed(st, e))?;
    w.flush().map_err(io_err(&corpus_path))?;
    let report_path = out.join(a::INGEST_REPORT);
    write_json(&report_path, &json!({ "sources": summary, "header": store.header() }))?;
    Ok(vec![corpus_path, report_path])
}

fn seeded_sample<T: Clone>(items: &[T], n: Option<usize>, seed: u64) -> Vec<T> {
    match n {
        Some(n) if n < items.len() => {
            let mut v = items.to_vec();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            v.truncate(n);
            v
        }
        _ => items.to_vec(),
    }
}

fn curate(cfg: &RunConfig, opts: RunOptions, registry: &TemplateRegistry) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Curate;
    let out = cfg.out_dir();
    let store = CorpusStore::read(open(&out.join(a::CORPUS))?).map_err(|e| PipelineError::failed(st, e))?;
    let mut instances = Vec::new();
    let mut rejected: BTreeMap<String, usize> = BTreeMap::new();
    let mut reject = |e: &curation::CurationError| {
        let key = format!("{e:?}").split(['(', ' ', '{']).next().unwrap_or("Other").to_string();
        *rejected.entry(key).or_insert(0) += 1;
    };

    for doc in store.of_kind(DocumentKind::Abstract) {
        match curation::make_abstract_completion(doc, registry) {
            Ok(i) => instances.push(i),
            Err(e) => reject(&e),
        }
    }
    for doc in store.of_kind(DocumentKind::StudyItem) {
        let Some(style) = KnowledgeStyle::for_document(doc) else { continue };
        match curation::make_knowledge_qa(doc, style, registry) {
            Ok(i) => instances.push(i),
            Err(e) => reject(&e),
        }
    }

    let mut cases: Vec<_> = store.of_kind(DocumentKind::CaseReport).cloned().collect();
    cases.sort_by(|x, y| x.id.cmp(&y.id));
    let mut weak_label_model = None;
    if !cases.is_empty() {
        match &cfg.curation.weak_label {
            Some(backend) => {
                let client = LlmClient::new(backend.clone(), ResponseCache::on_disk(cfg.cache_path()))
                    .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
                let chosen = seeded_sample(&cases, cfg.curation.max_case_reports, derive_seed(cfg.seed, "case-reports"));
                let questions: Vec<CaseQuestion> = match &cfg.curation.case_questions {
                    Some(qs) => qs.iter().map(|&q| CaseQuestion::new(q).expect("validated")).collect(),
                    None => CaseQuestion::all().collect(),
                };
                for r in curation::make_case_qa_batch(&chosen, &questions, &client, registry, opts.jobs) {
                    match r {
                        Ok(i) => instances.push(i),
                        Err(curation::CurationError::Backend(e)) => {
                            return Err(PipelineError::failed(st, format!("weak-label backend: {e}")))
                        }
                        Err(e) => reject(&e),
                    }
                }
                weak_label_model = Some(backend.model_id.clone());
            }
            None => log::warn!("{} case reports present but no weak-label backend configured", cases.len()),
        }
    }

    for i in &instances {
        i.validate(registry).map_err(|e| PipelineError::failed(st, e))?;
    }
    instances.sort_by(|x, y| (&x.source_doc, x.task).cmp(&(&y.source_doc, y.task)));

    let inst_path = out.join(a::INSTRUCTIONS);
    let mut w = BufWriter::new(File::create(&inst_path).map_err(io_err(&inst_path))?);
    curation::write_instances(&mut w, &instances).map_err(|e| PipelineError::failed(st, e))?;
    w.flush().map_err(io_err(&inst_path))?;

    let counts: BTreeMap<String, usize> = curation::task_counts(&instances)
        .into_iter()
        .map(|(t, n)| (t.to_string(), n))
        .collect();
    let report_path = out.join(a::CURATION_REPORT);
    write_json(
        &report_path,
        &json!({
            "total": instances.len(),
            "per_task": counts,
            "rejected": rejected,
            "weak_label_model": weak_label_model,
            "template_digest": registry.digest(),
        }),
    )?;
    Ok(vec![inst_path, report_path])
}

/// Split of every task family, each shuffled with its own derived seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub parts: BTreeMap<String, SplitResult>,
}

impl SplitManifest {
    pub fn validation_ids(&self) -> impl Iterator<Item = &String> {
        self.parts.values().flat_map(|p| p.validation.iter())
    }
}

fn family(task: TaskKind) -> &'static str {
    match task {
        TaskKind::AbstractCompletion => "abstract",
        TaskKind::CaseQa(_) => "case_qa",
        TaskKind::FillInBlank | TaskKind::Mcq | TaskKind::ShortAnswerQa => "knowledge",
    }
}

fn split(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Split;
    let out = cfg.out_dir();
    let instances: Vec<InstructionInstance> = read_jsonl(&out.join(a::INSTRUCTIONS), st)?;
    let mut ids: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for i in &instances {
        ids.entry(family(i.task)).or_default().push(i.id.clone());
    }
    let mut parts = BTreeMap::new();
    for (fam, list) in ids {
        let seed = derive_seed(cfg.seed, &format!("split/{fam}"));
        let s = curation::split_train_val(&list, seed).map_err(|e| PipelineError::failed(st, e))?;
        log::info!("{fam}: {} train, {} validation", s.train.len(), s.validation.len());
        parts.insert(fam.to_string(), s);
    }
    let path = out.join(a::SPLIT);
    write_json(&path, &SplitManifest { seed: cfg.seed, parts })?;
    Ok(vec![path])
}

/// One evaluation prompt with its reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub task: String,
    pub group: ValidationGroup,
    pub instruction: String,
    pub input: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

impl EvalItem {
    pub fn answer_kind(&self) -> AnswerKind {
        match self.task.as_str() {
            "long_form_qa" => AnswerKind::LongFormQa,
            "external_mcq" => AnswerKind::Mcq,
            t => t.parse::<TaskKind>().map(AnswerKind::for_task).unwrap_or(AnswerKind::FreeText),
        }
    }

    pub fn prompt(&self) -> String {
        build_prompt(&self.instruction, &self.input)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub model: String,
    pub item_id: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_digest: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ImportedResponse {
    item_id: String,
    response: String,
}

#[derive(Debug, Deserialize)]
struct LongFormRecord {
    id: String,
    question: String,
    answer: String,
}

#[derive(Debug, Deserialize)]
struct McqRecord {
    id: String,
    question: String,
    options: Vec<String>,
    answer: String,
}

fn mcq_options(input: &str) -> Vec<String> {
    LETTERS
        .iter()
        .filter_map(|l| {
            let prefix = format!("{l}. ");
            input.lines().find_map(|line| line.strip_prefix(prefix.as_str()).map(str::to_string))
        })
        .collect()
}

pub const INTERNAL_TASKS: [TaskKind; 4] = [
    TaskKind::AbstractCompletion,
    TaskKind::FillInBlank,
    TaskKind::Mcq,
    TaskKind::ShortAnswerQa,
];

fn build_eval_items(cfg: &RunConfig, registry: &TemplateRegistry) -> Result<Vec<EvalItem>, PipelineError> {
    let st = Stage::Infer;
    let out = cfg.out_dir();
    let instances: Vec<InstructionInstance> = read_jsonl(&out.join(a::INSTRUCTIONS), st)?;
    let split: SplitManifest = read_json(&out.join(a::SPLIT), st)?;
    let by_id: HashMap<&str, &InstructionInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut per_task: BTreeMap<TaskKind, Vec<&InstructionInstance>> = BTreeMap::new();
    for id in split.validation_ids() {
        let inst = by_id
            .get(id.as_str())
            .ok_or_else(|| PipelineError::failed(st, format!("split lists unknown instance {id}")))?;
        if INTERNAL_TASKS.contains(&inst.task) {
            per_task.entry(inst.task).or_default().push(inst);
        }
    }
    let mut items = Vec::new();
    for task in INTERNAL_TASKS {
        let mut list = per_task.remove(&task).unwrap_or_default();
        list.sort_by(|x, y| x.id.cmp(&y.id));
        let mut chosen = seeded_sample(&list, cfg.evaluation.max_per_task, derive_seed(cfg.seed, &format!("eval/{task}")));
        chosen.sort_by(|x, y| x.id.cmp(&y.id));
        for inst in chosen {
            items.push(EvalItem {
                id: inst.id.clone(),
                task: task.to_string(),
                group: ValidationGroup::Internal,
                instruction: inst.instruction.clone(),
                input: inst.input.clone(),
                reference: inst.output.clone(),
                options: if task == TaskKind::Mcq { mcq_options(&inst.input) } else { Vec::new() },
            });
        }
    }
    if let Some(p) = &cfg.evaluation.external_long_form {
        let records: Vec<LongFormRecord> = read_jsonl(&cfg.resolve(p), st)?;
        for r in records {
            let rendered = registry
                .render(TemplateId::LongFormQa, &payload([("question", r.question.as_str())]))
                .map_err(|e| PipelineError::failed(st, e))?;
            items.push(EvalItem {
                id: format!("ext:long_form:{}", r.id),
                task: "long_form_qa".into(),
                group: ValidationGroup::External,
                instruction: rendered.instruction,
                input: rendered.input,
                reference: r.answer,
                options: Vec::new(),
            });
        }
    }
    if let Some(p) = &cfg.evaluation.external_mcq {
        let records: Vec<McqRecord> = read_jsonl(&cfg.resolve(p), st)?;
        for r in records {
            if r.options.len() != 4 {
                return Err(PipelineError::failed(st, format!("external MCQ {} has {} options", r.id, r.options.len())));
            }
            let letter = match r.answer.trim().parse::<Letter>() {
                Ok(l) => l.to_string(),
                Err(_) => r
                    .options
                    .iter()
                    .position(|o| o == &r.answer)
                    .map(|i| LETTERS[i].to_string())
                    .ok_or_else(|| PipelineError::failed(st, format!("external MCQ {} answer is not A-D", r.id)))?,
            };
            let o = &r.options;
            let rendered = registry
                .render(
                    TaskKind::Mcq,
                    &payload([
                        ("question", r.question.as_str()),
                        ("option_a", o[0].as_str()),
                        ("option_b", o[1].as_str()),
                        ("option_c", o[2].as_str()),
                        ("option_d", o[3].as_str()),
                    ]),
                )
                .map_err(|e| PipelineError::failed(st, e))?;
            items.push(EvalItem {
                id: format!("ext:mcq:{}", r.id),
                task: "external_mcq".into(),
                group: ValidationGroup::External,
                instruction: rendered.instruction,
                input: rendered.input,
                reference: letter,
                options: r.options,
            });
        }
    }
    Ok(items)
}

fn infer(cfg: &RunConfig, opts: RunOptions, registry: &TemplateRegistry) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Infer;
    let out = cfg.out_dir();
    let items = build_eval_items(cfg, registry)?;
    if items.is_empty() {
        return Err(PipelineError::failed(st, "no evaluation items"));
    }
    let items_path = out.join(a::EVAL_ITEMS);
    write_jsonl(&items_path, &items)?;

    let prompts: Vec<String> = items.iter().map(EvalItem::prompt).collect();
    let max_in_flight = cfg.evaluation.max_in_flight.unwrap_or(opts.jobs).max(1);
    let mut responses = Vec::new();
    for b in &cfg.backends {
        let client = LlmClient::new(b.backend.clone(), ResponseCache::on_disk(cfg.cache_path()))
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        let results = client.batch_complete(&prompts, max_in_flight);
        let failures: Vec<String> = results
            .iter()
            .zip(&items)
            .filter_map(|(r, it)| r.as_ref().err().map(|e| format!("{}: {e}", it.id)))
            .collect();
        if !failures.is_empty() {
            return Err(PipelineError::failed(
                st,
                format!("{} of {} requests to {} failed; first: {}", failures.len(), items.len(), b.name, failures[0]),
            ));
        }
        log::info!("{}: {} responses ({} network calls)", b.name, results.len(), client.network_calls());
        for (r, it) in results.into_iter().zip(&items) {
            let r = r.expect("failures handled above");
            responses.push(ModelResponse {
                model: b.name.clone(),
                item_id: it.id.clone(),
                response: r.text,
                request_digest: Some(r.request_digest),
            });
        }
    }
    for m in &cfg.imported {
        let rows: Vec<ImportedResponse> = read_jsonl(&cfg.resolve(&m.responses), st)?;
        let map: HashMap<String, String> = rows.into_iter().map(|r| (r.item_id, r.response)).collect();
        let missing: Vec<&str> = items.iter().filter(|it| !map.contains_key(&it.id)).map(|it| it.id.as_str()).collect();
        if !missing.is_empty() {
            return Err(PipelineError::failed(
                st,
                format!("imported responses for {} lack {} items, e.g. {}", m.name, missing.len(), missing[0]),
            ));
        }
        for it in &items {
            responses.push(ModelResponse {
                model: m.name.clone(),
                item_id: it.id.clone(),
                response: map[&it.id].clone(),
                request_digest: None,
            });
        }
    }
    let resp_path = out.join(a::RESPONSES);
    write_jsonl(&resp_path, &responses)?;
    Ok(vec![items_path, resp_path])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ExtractedRow {
    model: String,
    item_id: String,
    task: String,
    #[serde(flatten)]
    answer: ExtractedAnswer,
}

fn extract_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Extract;
    let out = cfg.out_dir();
    let items: Vec<EvalItem> = read_jsonl(&out.join(a::EVAL_ITEMS), st)?;
    let by_id: HashMap<&str, &EvalItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let responses: Vec<ModelResponse> = read_jsonl(&out.join(a::RESPONSES), st)?;
    let mut rows = Vec::with_capacity(responses.len());
    for r in responses {
        let item = by_id
            .get(r.item_id.as_str())
            .ok_or_else(|| PipelineError::failed(st, format!("response for unknown item {}", r.item_id)))?;
        rows.push(ExtractedRow {
            answer: extract(&r.response, item.answer_kind(), &item.options),
            model: r.model,
            item_id: r.item_id,
            task: item.task.clone(),
        });
    }
    let path = out.join(a::EXTRACTED);
    write_jsonl(&path, &rows)?;
    Ok(vec![path])
}

/// Per-instance primary metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub task: String,
    pub model: String,
    pub item_id: String,
    pub metric: String,
    pub score: f64,
}

fn score(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Score;
    let out = cfg.out_dir();
    let items: Vec<EvalItem> = read_jsonl(&out.join(a::EVAL_ITEMS), st)?;
    let by_id: HashMap<&str, &EvalItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let extracted: Vec<ExtractedRow> = read_jsonl(&out.join(a::EXTRACTED), st)?;

    let mut records = Vec::with_capacity(extracted.len());
    let mut mcq: BTreeMap<(String, String), (Vec<ExtractedAnswer>, Vec<Letter>)> = BTreeMap::new();
    let mut neural_pairs: Vec<(String, String, String, ScorePair)> = Vec::new();
    for row in &extracted {
        let item = by_id
            .get(row.item_id.as_str())
            .ok_or_else(|| PipelineError::failed(st, format!("extraction for unknown item {}", row.item_id)))?;
        let (metric, value) = if item.answer_kind() == AnswerKind::Mcq {
            let gold: Letter = item.reference.parse().map_err(|e| PipelineError::failed(st, e))?;
            let entry = mcq.entry((row.task.clone(), row.model.clone())).or_default();
            entry.0.push(row.answer.clone());
            entry.1.push(gold);
            let correct = metrics::correctness(std::slice::from_ref(&row.answer), &[gold]).expect("equal lengths")[0];
            ("accuracy", correct)
        } else {
            neural_pairs.push((
                row.task.clone(),
                row.model.clone(),
                row.item_id.clone(),
                ScorePair {
                    candidate: row.answer.value.clone(),
                    reference: item.reference.clone(),
                },
            ));
            ("rouge_l", metrics::rouge_l(&row.answer.value, &item.reference).f)
        };
        records.push(ScoreRecord {
            task: row.task.clone(),
            model: row.model.clone(),
            item_id: row.item_id.clone(),
            metric: metric.into(),
            score: value,
        });
    }
    let scores_path = out.join(a::SCORES);
    write_jsonl(&scores_path, &records)?;

    let mut classification = Vec::new();
    for ((task, model), (preds, golds)) in &mcq {
        let s = metrics::classify_scores(preds, golds).map_err(|e| PipelineError::failed(st, e))?;
        classification.push(json!({ "task": task, "model": model, "score": s }));
    }
    let class_path = out.join(a::CLASSIFICATION);
    write_json(&class_path, &classification)?;

    let neural = match &cfg.evaluation.scorer_endpoint {
        None => json!({ "status": "not_configured" }),
        Some(endpoint) => {
            let pairs: Vec<ScorePair> = neural_pairs.iter().map(|p| p.3.clone()).collect();
            match ScorerClient::new(endpoint.clone(), Duration::from_secs(300)).and_then(|c| c.score(&pairs)) {
                Ok(scores) => json!({
                    "status": "ok",
                    "scores": neural_pairs.iter().zip(scores).map(|(p, s)| json!({
                        "task": p.0, "model": p.1, "item_id": p.2,
                        "bert_score": s.bert_score, "bart_score": s.bart_score,
                    })).collect::<Vec<_>>(),
                }),
                Err(e) => {
                    log::warn!("neural scores absent: {e}");
                    json!({ "status": "unavailable", "reason": e.to_string() })
                }
            }
        }
    };
    let neural_path = out.join(a::NEURAL);
    write_json(&neural_path, &neural)?;
    Ok(vec![scores_path, class_path, neural_path])
}

/// Task keys in table order with their row labels.
pub const TASK_ROWS: [(&str, ValidationGroup, &str); 6] = [
    ("abstract_completion", ValidationGroup::Internal, "Abstract completion (Rouge-L)"),
    ("fill_in_blank", ValidationGroup::Internal, "Fill-in-the-blank (Rouge-L)"),
    ("mcq", ValidationGroup::Internal, "MCQ (Accuracy Score)"),
    ("short_answer_qa", ValidationGroup::Internal, "Short-answer QA (Rouge-L)"),
    ("long_form_qa", ValidationGroup::External, "Long-form QA (Rouge-L)"),
    ("external_mcq", ValidationGroup::External, "MCQ (Accuracy Score)"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskComparison {
    task: String,
    comparison: ModelComparison,
}

fn column_order(cfg: &RunConfig) -> Vec<String> {
    let mut cols = vec![cfg.reference_model.clone()];
    cols.extend(cfg.model_names().into_iter().filter(|m| *m != cfg.reference_model));
    cols
}

/// `(item_id, score)` lists keyed by model.
type ScoresByModel = BTreeMap<String, Vec<(String, f64)>>;

fn compare(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Compare;
    let out = cfg.out_dir();
    let records: Vec<ScoreRecord> = read_jsonl(&out.join(a::SCORES), st)?;
    let mut per_task: BTreeMap<&str, ScoresByModel> = BTreeMap::new();
    for r in &records {
        per_task
            .entry(r.task.as_str())
            .or_default()
            .entry(r.model.clone())
            .or_default()
            .push((r.item_id.clone(), r.score));
    }
    let columns = column_order(cfg);
    let mut comparisons = Vec::new();
    let mut csv_rows = Vec::new();
    for (task, _, _) in TASK_ROWS {
        let Some(models) = per_task.get(task) else { continue };
        let mut aligned = BTreeMap::new();
        let ref_ids: Vec<&String> = models
            .get(&cfg.reference_model)
            .map(|v| v.iter().map(|(id, _)| id).collect())
            .unwrap_or_default();
        for (model, list) in models {
            let ids: Vec<&String> = list.iter().map(|(id, _)| id).collect();
            if ids != ref_ids {
                return Err(PipelineError::failed(st, format!("{model} was scored on different {task} items")));
            }
            aligned.insert(model.clone(), list.iter().map(|(_, s)| *s).collect::<Vec<f64>>());
        }
        let bcfg = cfg.bootstrap.with_seed(derive_seed(cfg.seed, &format!("bootstrap/{task}")));
        let cmp = stats::compare_models(&aligned, &cfg.reference_model, &bcfg, cfg.evaluation.n_comparisons)
            .map_err(|e| PipelineError::failed(st, format!("{task}: {e}")))?;
        let mut rows = ComparisonRow::rows(task, &cmp);
        rows.sort_by_key(|r| columns.iter().position(|c| *c == r.model).unwrap_or(usize::MAX));
        csv_rows.extend(rows);
        comparisons.push(TaskComparison {
            task: task.to_string(),
            comparison: cmp,
        });
    }
    let json_path = out.join(a::COMPARISONS);
    write_json(&json_path, &comparisons)?;
    let csv_path = out.join(a::COMPARISON_CSV);
    let f = File::create(&csv_path).map_err(io_err(&csv_path))?;
    stats::write_comparison_csv(f, &csv_rows).map_err(|e| PipelineError::failed(st, e))?;
    Ok(vec![json_path, csv_path])
}

fn report_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Report;
    let out = cfg.out_dir();
    let comparisons: Vec<TaskComparison> = read_json(&out.join(a::COMPARISONS), st)?;
    let columns = column_order(cfg);
    let rows: Vec<TableRow> = TASK_ROWS
        .iter()
        .filter(|(t, _, _)| comparisons.iter().any(|c| c.task == *t))
        .map(|(t, g, l)| TableRow {
            group: *g,
            task: t.to_string(),
            label: l.to_string(),
        })
        .collect();
    let results: Vec<ComparisonRow> = comparisons
        .iter()
        .flat_map(|c| ComparisonRow::rows(&c.task, &c.comparison))
        .collect();
    let table = report::render_metric_table(&rows, &cfg.reference_model, &columns, &results)
        .map_err(|e| PipelineError::failed(st, e))?;

    let mut md = String::from("# Evaluation report\n\n## Primary metrics\n\nMean ± SD (95% CI) over bootstrap replicates.\n\n");
    md.push_str(&table.markdown);

    let classification: Vec<serde_json::Value> = read_json(&out.join(a::CLASSIFICATION), st)?;
    if !classification.is_empty() {
        md.push_str("\n## Macro-F1\n\n");
        let mut header = vec!["Task".to_string()];
        header.extend(columns.iter().cloned());
        md.push_str(&format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len())));
        for (task, group, _) in TASK_ROWS {
            let cells: Vec<String> = columns
                .iter()
                .map(|m| {
                    classification
                        .iter()
                        .find(|c| c["task"] == task && c["model"] == m.as_str())
                        .and_then(|c| c["score"]["macro_f1"].as_f64())
                        .map(report::fmt2)
                        .unwrap_or_else(|| report::EMPTY_CELL.to_string())
                })
                .collect();
            if cells.iter().any(|c| c != report::EMPTY_CELL) {
                md.push_str(&format!("| MCQ, {} | {} |\n", group.label().to_lowercase(), cells.join(" | ")));
            }
        }
    }

    let neural_path = out.join(a::NEURAL);
    if let Ok(neural) = read_json::<serde_json::Value>(&neural_path, st) {
        let status = neural["status"].as_str().unwrap_or("unknown");
        if status != "ok" {
            md.push_str(&format!("\nNeural scores: {}.\n", status.replace('_', " ")));
        }
    }

    let mut outputs = Vec::new();
    if let Some(h) = &cfg.humaneval {
        let store = SessionStore::new(cfg.resolve(&h.store_dir));
        if store.exists(&h.session_id) {
            let session = store.load(&h.session_id).map_err(|e| PipelineError::failed(st, e))?;
            let agg = session.aggregate();
            let ratings = report::render_rating_table(&agg, Some(&h.models)).map_err(|e| PipelineError::failed(st, e))?;
            md.push_str("\n## Human evaluation\n\nMean of both raters' 1 to 5 scores.");
            if !agg.complete {
                md.push_str(&format!(" Incomplete: {} of {} ratings pending.", session.pending_slots(), session.total_slots()));
            }
            md.push_str("\n\n");
            md.push_str(&ratings.markdown);
            let p = out.join(a::RATING_TABLE_CSV);
            fs::write(&p, ratings.csv).map_err(io_err(&p))?;
            outputs.push(p);
        }
    }

    let report_path = out.join(a::REPORT);
    fs::write(&report_path, md).map_err(io_err(&report_path))?;
    let csv_path = out.join(a::METRIC_TABLE_CSV);
    fs::write(&csv_path, table.csv).map_err(io_err(&csv_path))?;
    outputs.insert(0, csv_path);
    outputs.insert(0, report_path);
    Ok(outputs)
}
