mod common;

use std::collections::HashMap;
use std::fs;

use common::{fixtures, toy_dataset};
use plrh_core::config::RunConfig;
use plrh_core::data_model::{Dataset, Split};
use plrh_core::evaluation::evaluate;
use plrh_core::llm_client::{
    Backend, CompletionRequest, LlmClient, LlmError, OracleMock, RawCompletion, RetryPolicy, ScriptedMock,
};
use plrh_core::orchestrator::{load_inputs, run_sweep, OrchestratorError, Pipeline, Workspace, PREDICTIONS_EXPORT};
use plrh_core::prompting::{default_seeds, parse_rendered, PromptStage};
use plrh_core::retrieval::{select_examples, TrainPool};
use plrh_core::store::{PREDICTIONS_LOG, TEST_LOG, TRAIN_LOG};

struct FnBackend<F>(F);

impl<F: Fn(&CompletionRequest) -> String + Send + Sync> Backend for FnBackend<F> {
    fn model_id(&self) -> &str {
        "fn-backend"
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        Ok(RawCompletion::stop((self.0)(req)))
    }
}

fn client(b: impl Backend + 'static) -> LlmClient {
    LlmClient::new(Box::new(b), RetryPolicy::no_backoff(1))
}

fn oracle(d: &Dataset) -> LlmClient {
    client(OracleMock::new("oracle", d))
}

fn cfg(n: usize) -> RunConfig {
    RunConfig { n_examples: n, ..RunConfig::default() }
}

#[test]
fn stage1_writes_then_caches() {
    let d = toy_dataset(5, 0);
    let seeds = default_seeds();
    let c = cfg(8);
    // a scripted fixture for exactly these prompts
    let planner = oracle(&d);
    let plan = Pipeline::new(&c, &d, &seeds, &planner);
    let fixture: HashMap<String, String> = d
        .train()
        .map(|s| (plan.stage1_prompt(s).unwrap().rendered_hash().to_owned(), format!(" Rationale for {}.\n\n", s.id)))
        .collect();
    let scripted = client(ScriptedMock::new("scripted", fixture));
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &scripted);
    let r = p.run_stage1(&mut ws).unwrap();
    assert_eq!((r.written, r.cached, r.backend_calls), (5, 0, 5));
    let train = p.train_rationales(&ws).unwrap();
    assert_eq!(train.len(), 5);
    assert!(train.values().all(|r| r.starts_with("Rationale for tr")));

    drop(ws);
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let before = scripted.call_count();
    let r = p.run_stage1(&mut ws).unwrap();
    assert_eq!((r.written, r.cached), (0, 5));
    assert_eq!(scripted.call_count(), before);
}

#[test]
fn stage1_partial_cache_issues_only_missing_calls() {
    let small = toy_dataset(2, 0);
    let full = toy_dataset(5, 0);
    let seeds = default_seeds();
    let c = cfg(8);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    Pipeline::new(&c, &small, &seeds, &oracle(&small)).run_stage1(&mut ws).unwrap();
    let cl = oracle(&full);
    let r = Pipeline::new(&c, &full, &seeds, &cl).run_stage1(&mut ws).unwrap();
    assert_eq!(cl.call_count(), 3);
    assert_eq!((r.written, r.cached), (3, 2));
}

#[test]
fn empty_rationale_is_reported_not_stored() {
    let d = toy_dataset(5, 0);
    let seeds = default_seeds();
    let c = cfg(8);
    let cl = client(FnBackend(|req: &CompletionRequest| {
        if req.prompt_text.contains("Scene number 3.") {
            "   \n\n".into()
        } else {
            " fine.\n".into()
        }
    }));
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    let r = p.run_stage1(&mut ws).unwrap();
    assert_eq!(r.written, 4);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].sample_id.as_str(), "tr003");
    assert!(!p.train_rationales(&ws).unwrap().contains_key(&r.failures[0].sample_id));
}

#[test]
fn stage2_records_cite_fresh_selection() {
    let d = toy_dataset(6, 4);
    let seeds = default_seeds();
    let c = cfg(2);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    p.run_stage1(&mut ws).unwrap();
    let train = p.train_rationales(&ws).unwrap();
    let r = p.run_stage2(&train, &mut ws).unwrap();
    assert_eq!(r.written, 4);
    let pool = TrainPool::from_dataset(&d);
    for s in d.test() {
        let rec = p.stage2_record(s, &train, &ws).unwrap().unwrap();
        assert_eq!(rec.example_ids.len(), 2);
        let fresh = select_examples(&s.feature.to_f64(), &pool, 2).unwrap().ids();
        assert_eq!(rec.example_ids, fresh);
    }
}

#[test]
fn n_larger_than_pool_uses_whole_pool() {
    let d = toy_dataset(3, 2);
    let seeds = default_seeds();
    let c = cfg(10);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    p.run_stage1(&mut ws).unwrap();
    let train = p.train_rationales(&ws).unwrap();
    p.run_stage2(&train, &mut ws).unwrap();
    for s in d.test() {
        let mut ids = p.stage2_record(s, &train, &ws).unwrap().unwrap().example_ids.clone();
        ids.sort();
        assert_eq!(ids, d.train().map(|t| t.id.clone()).collect::<Vec<_>>());
    }
}

#[test]
fn missing_train_rationale_aborts_before_any_call() {
    let d = toy_dataset(4, 2);
    let seeds = default_seeds();
    let c = cfg(4);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    p.run_stage1(&mut ws).unwrap();
    let mut train = p.train_rationales(&ws).unwrap();
    let victim = d.train().next().unwrap().id.clone();
    train.remove(&victim);
    cl.reset_call_count();
    match p.run_stage2(&train, &mut ws) {
        Err(OrchestratorError::MissingTrainRationale(id)) => assert_eq!(id, victim),
        other => panic!("expected missing rationale, got {other:?}"),
    }
    assert_eq!(cl.call_count(), 0);
}

#[test]
fn oracle_run_is_perfect_and_stages_share_examples() {
    let d = toy_dataset(10, 6);
    let seeds = default_seeds();
    let c = cfg(4);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    let s = p.run_all(&mut ws, None).unwrap();
    assert!(s.is_complete());
    assert_eq!(evaluate(&s.predictions, &d).unwrap().mean_accuracy, 1.0);

    let train = p.train_rationales(&ws).unwrap();
    for pred in &s.predictions {
        let sample = d.get(&pred.sample_id).unwrap();
        let stage2 = p.stage2_record(sample, &train, &ws).unwrap().unwrap();
        assert_eq!(pred.example_ids, stage2.example_ids);
        assert_eq!(pred.rationale_used.as_deref(), Some(stage2.rationale.as_str()));
        let prompt = p.stage3_prompt(sample, &pred.example_ids, &train, Some(&stage2.rationale)).unwrap();
        assert_eq!(prompt.rendered_hash(), pred.prompt_hash);
        // ascending similarity: the best match sits next to the input
        let parsed = parse_rendered(prompt.render()).unwrap();
        let best = d.get(&pred.example_ids[0]).unwrap();
        assert_eq!(parsed.examples.last().unwrap().caption, best.caption);
    }
}

#[test]
fn descending_order_puts_best_match_first() {
    let d = toy_dataset(10, 2);
    let seeds = default_seeds();
    let mut c = cfg(4);
    c.example_order = plrh_core::config::ExampleOrder::DescendingSimilarity;
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    let s = p.run_all(&mut ws, None).unwrap();
    let train = p.train_rationales(&ws).unwrap();
    for pred in &s.predictions {
        let sample = d.get(&pred.sample_id).unwrap();
        let prompt = p.stage3_prompt(sample, &pred.example_ids, &train, pred.rationale_used.as_deref()).unwrap();
        let parsed = parse_rendered(prompt.render()).unwrap();
        assert_eq!(parsed.examples[0].caption, d.get(&pred.example_ids[0]).unwrap().caption);
    }
}

#[test]
fn ablation_prompts_have_no_rationale() {
    let d = toy_dataset(8, 4);
    let seeds = default_seeds();
    let mut c = cfg(3);
    c.ablation_no_rationale = true;
    let seen = std::sync::Mutex::new(Vec::new());
    let oracle_backend = OracleMock::new("oracle", &d);
    let cl = client(FnBackend(move |req: &CompletionRequest| {
        if req.prompt_text.ends_with("\nAnswer:") {
            seen.lock().unwrap().push(req.prompt_text.clone());
        }
        oracle_backend.complete_raw(req).unwrap().text
    }));
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    let s = p.run_all(&mut ws, None).unwrap();
    assert!(s.stage2.is_none());
    assert!(s.is_complete());
    let train = p.train_rationales(&ws).unwrap();
    for pred in &s.predictions {
        assert!(pred.rationale_used.is_none());
        let sample = d.get(&pred.sample_id).unwrap();
        let prompt = p.stage3_prompt(sample, &pred.example_ids, &train, None).unwrap();
        assert_eq!(prompt.rendered_hash(), pred.prompt_hash);
        assert_eq!(prompt.render().matches("Rationale:").count(), 0);
    }
    assert_eq!(fs::read_to_string(dir.path().join(TEST_LOG)).unwrap_or_default(), "");
}

#[test]
fn answer_is_first_line_trimmed() {
    let d = toy_dataset(3, 1);
    let seeds = default_seeds();
    let mut c = cfg(2);
    c.answer.stop.clear();
    let cl = client(FnBackend(|req: &CompletionRequest| {
        if req.prompt_text.ends_with("\nAnswer:") {
            " helmet \nextra".into()
        } else {
            " some rationale.".into()
        }
    }));
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let s = Pipeline::new(&c, &d, &seeds, &cl).run_all(&mut ws, None).unwrap();
    assert_eq!(s.predictions[0].answer, "helmet");
}

#[test]
fn stage3_never_runs_without_stage2() {
    let d = toy_dataset(4, 3);
    let seeds = default_seeds();
    let c = cfg(2);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let p = Pipeline::new(&c, &d, &seeds, &cl);
    p.run_stage1(&mut ws).unwrap();
    let train = p.train_rationales(&ws).unwrap();
    cl.reset_call_count();
    let r = p.run_stage3(&train, &mut ws).unwrap();
    assert_eq!(r.failures.len(), 3);
    assert_eq!(r.written, 0);
    assert_eq!(cl.call_count(), 0);
}

#[test]
fn rerun_changes_nothing_and_n_change_misses() {
    let d = toy_dataset(8, 4);
    let seeds = default_seeds();
    let c = cfg(3);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    Pipeline::new(&c, &d, &seeds, &cl).run_all(&mut ws, None).unwrap();
    let logs = |dir: &std::path::Path| {
        [TRAIN_LOG, TEST_LOG, PREDICTIONS_LOG].map(|n| fs::read(dir.join(n)).unwrap())
    };
    let before = logs(dir.path());
    cl.reset_call_count();
    Pipeline::new(&c, &d, &seeds, &cl).run_all(&mut ws, None).unwrap();
    assert_eq!(cl.call_count(), 0);
    assert_eq!(logs(dir.path()), before);

    let c4 = cfg(4);
    let s = Pipeline::new(&c4, &d, &seeds, &cl).run_all(&mut ws, None).unwrap();
    assert_eq!(s.stage1.cached, 8);
    assert_eq!(s.stage2.as_ref().unwrap().cached, 0);
    assert_eq!(s.stage3.cached, 0);
    assert_eq!(cl.call_count(), 8);
}

#[test]
fn concurrency_does_not_change_outputs() {
    let d = toy_dataset(12, 9);
    let seeds = default_seeds();
    let mut outputs = Vec::new();
    for conc in [1, 3, 16] {
        let mut c = cfg(4);
        c.concurrency = conc;
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path(), false).unwrap();
        Pipeline::new(&c, &d, &seeds, &oracle(&d)).run_all(&mut ws, None).unwrap();
        outputs.push((
            fs::read(dir.path().join(PREDICTIONS_LOG)).unwrap(),
            fs::read(dir.path().join(PREDICTIONS_EXPORT)).unwrap(),
        ));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn dry_run_calls_nothing_and_writes_nothing() {
    let d = toy_dataset(6, 3);
    let seeds = default_seeds();
    let c = cfg(2);
    let cl = oracle(&d);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), true).unwrap();
    let s = Pipeline::new(&c, &d, &seeds, &cl).run_all(&mut ws, None).unwrap();
    assert_eq!(cl.call_count(), 0);
    assert_eq!(s.stage3.prompt_hashes.len(), 3);
    assert!(s.predictions_path.is_none());
    for name in [TRAIN_LOG, TEST_LOG, PREDICTIONS_LOG, PREDICTIONS_EXPORT] {
        let len = fs::metadata(dir.path().join(name)).map(|m| m.len()).unwrap_or(0);
        assert_eq!(len, 0, "{name}");
    }
}

#[test]
fn backend_errors_become_failures() {
    struct Flaky;
    impl Backend for Flaky {
        fn model_id(&self) -> &str {
            "flaky"
        }
        fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
            if req.prompt_text.contains("Scene number 1.") {
                Err(LlmError::Timeout)
            } else {
                Ok(RawCompletion::stop(" ok.\n"))
            }
        }
    }
    let d = toy_dataset(3, 0);
    let seeds = default_seeds();
    let c = cfg(2);
    let cl = client(Flaky);
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(dir.path(), false).unwrap();
    let r = Pipeline::new(&c, &d, &seeds, &cl).run_stage1(&mut ws).unwrap();
    assert_eq!(r.written, 2);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].stage, PromptStage::Stage1Rationale);
}

#[test]
fn scripted_fixture_replays_deterministically() {
    let mut c = RunConfig::from_file(&fixtures().join("run.conf")).unwrap();
    let inputs = load_inputs(&c).unwrap();
    assert_eq!(inputs.dataset.split(Split::Train).count(), 12);
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        c.store = dir.path().to_owned();
        let cl = c.build_client(&inputs.dataset).unwrap();
        let mut ws = Workspace::open(dir.path(), false).unwrap();
        let p = Pipeline::new(&c, &inputs.dataset, &inputs.seeds, &cl);
        let s = p.run_all(&mut ws, None).unwrap();
        assert!(s.is_complete(), "{:?}", s.failures);
        assert_eq!(cl.call_count(), 28);
        files.push(fs::read(dir.path().join(PREDICTIONS_EXPORT)).unwrap());
        let again = p.run_all(&mut ws, None).unwrap();
        assert_eq!(again.backend_calls(), 0);
        assert_eq!(fs::read(dir.path().join(PREDICTIONS_EXPORT)).unwrap(), files[files.len() - 1]);
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn sweep_rows_for_each_n() {
    let d = toy_dataset(10, 4);
    let seeds = default_seeds();
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(8);
    c.store = dir.path().to_owned();
    let cl = oracle(&d);
    let res = run_sweep(&c, &d, &seeds, &cl, &[1, 2], false, false).unwrap();
    assert_eq!(res.rows.len(), 2);
    assert!(res.rows.iter().all(|r| r.accuracy == 1.0 && r.complete));
    let csv = fs::read_to_string(res.csv_path.unwrap()).unwrap();
    assert_eq!(csv.lines().next(), Some("n,variant,accuracy"));
    assert_eq!(csv.lines().count(), 3);
}
