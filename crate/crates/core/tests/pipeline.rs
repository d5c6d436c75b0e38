mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{scorer_server, ScorerMode};
use ophtha_bench::pipeline::{
    artifacts, file_digest, prepare_humaneval, run_pipeline, Manifest, PipelineError, RunConfig, RunOptions, Stage,
    StageOutcome,
};
use serde_json::Value;

fn mini_copy(edit: impl Fn(String) -> String) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let src = common::fixtures_dir().join("mini");
    for e in fs::read_dir(&src).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    let cfg_path = dir.path().join("config.toml");
    fs::write(&cfg_path, edit(fs::read_to_string(&cfg_path).unwrap())).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    (dir, cfg)
}

fn opts() -> RunOptions {
    RunOptions { jobs: 4, force: false }
}

fn out(dir: &tempfile::TempDir) -> PathBuf {
    dir.path().join("out")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const DETERMINISTIC: [&str; 6] = [
    artifacts::INSTRUCTIONS,
    artifacts::SPLIT,
    artifacts::RESPONSES,
    artifacts::SCORES,
    artifacts::COMPARISON_CSV,
    artifacts::METRIC_TABLE_CSV,
];

#[test]
fn full_run_is_complete_and_reproducible() {
    let (a, cfg_a) = mini_copy(|t| t);
    let (b, cfg_b) = mini_copy(|t| t);
    let outcomes = run_pipeline(&cfg_a, &Stage::ALL, opts()).unwrap();
    assert_eq!(outcomes.len(), 8);
    assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
    run_pipeline(&cfg_b, &Stage::ALL, RunOptions { jobs: 1, force: false }).unwrap();

    for name in DETERMINISTIC.iter().chain([&artifacts::REPORT, &artifacts::CLASSIFICATION]) {
        assert_eq!(
            file_digest(&out(&a).join(name)).unwrap(),
            file_digest(&out(&b).join(name)).unwrap(),
            "{name} differs between runs"
        );
    }

    let report = fs::read_to_string(out(&a).join(artifacts::REPORT)).unwrap();
    for label in [
        "Abstract completion (Rouge-L)",
        "Fill-in-the-blank (Rouge-L)",
        "MCQ (Accuracy Score)",
        "Short-answer QA (Rouge-L)",
        "Long-form QA (Rouge-L)",
        "**Internal validation**",
        "**External validation**",
        "MCQ, internal validation",
        "MCQ, external validation",
        "Neural scores: not configured.",
    ] {
        assert!(report.contains(label), "report lacks {label}");
    }
    let header = report.lines().find(|l| l.starts_with("| Task (Evaluation Metric)")).unwrap();
    assert_eq!(header, "| Task (Evaluation Metric) | leme | llama2-70b | gpt-4o |");

    let csv = fs::read_to_string(out(&a).join(artifacts::COMPARISON_CSV)).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6 * 3);
    for r in &rows {
        let fields: Vec<&str> = r.split(',').collect();
        assert_eq!(fields.len(), 9);
        if fields[1] == "leme" {
            assert_eq!(fields[6], "");
        } else {
            let p: f64 = fields[7].parse().unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    let manifest = Manifest::load(&out(&a));
    assert_eq!(manifest.seed, 20240501);
    assert_eq!(manifest.stages.len(), 8);
    for (name, digest) in &manifest.stages[&Stage::Score].outputs {
        assert_eq!(&file_digest(&out(&a).join(name)).unwrap(), digest);
    }
}

#[test]
fn rerun_is_a_no_op_until_inputs_change() {
    let (dir, cfg) = mini_copy(|t| t);
    run_pipeline(&cfg, &Stage::ALL, opts()).unwrap();
    let again = run_pipeline(&cfg, &Stage::ALL, opts()).unwrap();
    assert!(again.iter().all(|(_, o)| *o == StageOutcome::UpToDate));

    // touching an artifact invalidates its producer
    fs::write(out(&dir).join(artifacts::SCORES), "").unwrap();
    let third = run_pipeline(&cfg, &[Stage::Score], opts()).unwrap();
    assert_eq!(third, vec![(Stage::Score, StageOutcome::Ran)]);

    let forced = run_pipeline(&cfg, &[Stage::Report], RunOptions { jobs: 1, force: true }).unwrap();
    assert_eq!(forced, vec![(Stage::Report, StageOutcome::Ran)]);
}

#[test]
fn stage_without_upstream_artifacts_fails() {
    let (_dir, cfg) = mini_copy(|t| t);
    let err = run_pipeline(&cfg, &[Stage::Score], opts()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingUpstreamArtifact { stage: Stage::Score, .. }));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = fs::read_to_string(common::fixtures_dir().join("mini/config.toml")).unwrap();
    let cases = [
        base.replace("reference_model = \"leme\"", "reference_model = \"missing\""),
        base.replace("case_questions = [1, 4, 15]", "case_questions = [0, 16]"),
        base.replace("repetitions = 100", "repetitions = 0"),
        base.replace("seed = 20240501", "seed = \"abc\""),
        format!("{base}\nunexpected_key = 1\n"),
        base.replace("endpoint_url = \"mock://lexical/gpt\"", "endpoint_url = \"mock://lexical/gpt\"\ndefault_params = { temperature = 0.7 }"),
    ];
    for text in cases {
        let err = RunConfig::from_toml(&text, ".").unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
    let pinned = base.replace("reference_model = \"leme\"", "reference_model = \"leme\"\ntemplate_digest = \"00\"");
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(&pinned, dir.path()).unwrap();
    assert!(matches!(run_pipeline(&cfg, &[Stage::Ingest], opts()), Err(PipelineError::ConfigInvalid(_))));
}

#[test]
fn ingest_and_curate_accounting() {
    let (dir, cfg) = mini_copy(|t| t);
    run_pipeline(&cfg, &[Stage::Ingest, Stage::Curate, Stage::Split], opts()).unwrap();
    let ingest = read_json(&out(&dir).join(artifacts::INGEST_REPORT));
    assert!(ingest.to_string().contains("skipped"));
    let split = read_json(&out(&dir).join(artifacts::SPLIT));
    for (_, part) in split["parts"].as_object().unwrap() {
        let t = part["train"].as_array().unwrap().len();
        let v = part["validation"].as_array().unwrap().len();
        assert_eq!(t, (t + v) * 9 / 10);
    }
    let text = fs::read_to_string(out(&dir).join(artifacts::INSTRUCTIONS)).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let case_qa = lines.iter().filter(|l| l["task"].as_str().unwrap().starts_with("case_qa_")).count();
    assert_eq!(case_qa, 6 * 3);
    assert!(lines.iter().any(|l| l["task"] == "mcq"));
}

#[test]
fn neural_scores_ok_with_a_live_scorer() {
    let server = scorer_server(ScorerMode::Fixed(0.8, -2.0));
    let url = server.base_url.clone();
    let (dir, cfg) = mini_copy(move |t| t.replace("[evaluation]\n", &format!("[evaluation]\nscorer_endpoint = \"{url}\"\n")));
    run_pipeline(&cfg, &Stage::ALL, opts()).unwrap();
    let neural = read_json(&out(&dir).join(artifacts::NEURAL));
    assert_eq!(neural["status"], "ok");
    let scores = neural["scores"].as_array().unwrap();
    assert!(!scores.is_empty());
    assert!(scores.iter().all(|s| s["bert_score"] == 0.8));
    assert!(server.batches.lock().unwrap().iter().all(|&n| n <= 64));
    let report = fs::read_to_string(out(&dir).join(artifacts::REPORT)).unwrap();
    assert!(!report.contains("Neural scores:"));
}

#[test]
fn unreachable_scorer_is_reported_not_fatal() {
    let (dir, cfg) = mini_copy(|t| t.replace("[evaluation]\n", "[evaluation]\nscorer_endpoint = \"http://127.0.0.1:9\"\n"));
    run_pipeline(&cfg, &Stage::ALL, opts()).unwrap();
    let neural = read_json(&out(&dir).join(artifacts::NEURAL));
    assert_eq!(neural["status"], "unavailable");
    let report = fs::read_to_string(out(&dir).join(artifacts::REPORT)).unwrap();
    assert!(report.contains("Neural scores: unavailable."));
    assert!(out(&dir).join(artifacts::METRIC_TABLE_CSV).exists());
}

#[test]
fn failing_backend_fails_inference() {
    let (_dir, cfg) = mini_copy(|t| t.replace("\"mock://lexical/gpt\"", "\"http://127.0.0.1:9/v1/chat/completions\"\nmax_retries = 0"));
    let err = run_pipeline(&cfg, &Stage::ALL, opts()).unwrap_err();
    assert!(matches!(err, PipelineError::StageFailed { stage: Stage::Infer, .. }), "{err}");
}

#[test]
fn humaneval_session_is_prepared_once() {
    let (dir, cfg) = mini_copy(|t| t);
    let _state = prepare_humaneval(&cfg).unwrap();
    let session_file = dir.path().join("humaneval/mini/session.json");
    let first = fs::read(&session_file).unwrap();
    let _again = prepare_humaneval(&cfg).unwrap();
    assert_eq!(fs::read(&session_file).unwrap(), first);
    let session: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(session["samples"].as_array().unwrap().len(), 6);

    run_pipeline(&cfg, &Stage::ALL, opts()).unwrap();
    let report = fs::read_to_string(out(&dir).join(artifacts::REPORT)).unwrap();
    assert!(report.contains("Patient EHR summarization"));
    assert!(out(&dir).join(artifacts::RATING_TABLE_CSV).exists());
}
