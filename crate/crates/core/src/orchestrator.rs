//! Drives the three stages over a dataset with caching and resumability.
//!
//! Each stage builds every prompt up front (pure), looks each one up in the
//! store by `(sample, stage, prompt hash, model)`, and sends only the misses
//! to the backend. Misses are processed in id order, `concurrency` at a time;
//! each batch is appended to the store in id order once it completes, so the
//! logs are deterministic and an interrupted run loses at most one batch.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Utc;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExampleOrder, RunConfig};
use crate::data_model::{
    load_dataset, DataError, Dataset, PredictionRecord, RationaleRecord, RationaleStage, Sample,
    SampleId,
};
use crate::evaluation::{evaluate, EvalError};
use crate::hashing::{content_hash, ContentHasher};
use crate::llm_client::{CompletionRequest, LlmClient, LlmError};
use crate::prompting::{
    build_stage1, build_stage2, build_stage3, default_seeds, load_seeds, ExampleBlock, Prompt,
    PromptError, PromptStage, SeedExample,
};
use crate::retrieval::{select_examples, RetrievalError, SelectionResult, TrainPool};
use crate::store::{CacheKey, Store, StoreError, StoredRecord, MANIFEST};

/// Rationales longer than this are cut.
pub const MAX_RATIONALE_CHARS: usize = 512;
pub const PREDICTIONS_EXPORT: &str = "predictions.jsonl";
pub const FAILURES_REPORT: &str = "failures.jsonl";
pub const SWEEP_CSV: &str = "sweep.csv";
const DRY_RUN_TEXT: &str = "[dry-run]";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no stage-1 rationale for train sample `{0}`; run stage 1 first")]
    MissingTrainRationale(SampleId),
    #[error("stage-1 seed examples are empty")]
    NoSeeds,
}

/// A sample the stage could not complete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub sample_id: SampleId,
    pub stage: PromptStage,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: PromptStage,
    pub written: usize,
    pub cached: usize,
    pub failures: Vec<Failure>,
    pub backend_calls: u64,
    pub elapsed_ms: u64,
    /// Every prompt hash the stage built, by sample.
    #[serde(skip)]
    pub prompt_hashes: BTreeMap<SampleId, String>,
}

impl StageReport {
    fn new(stage: PromptStage) -> Self {
        Self {
            stage,
            written: 0,
            cached: 0,
            failures: Vec::new(),
            backend_calls: 0,
            elapsed_ms: 0,
            prompt_hashes: BTreeMap::new(),
        }
    }
}

/// A store plus an in-memory overlay used instead of it during dry runs.
pub struct Workspace {
    store: Store,
    overlay: HashMap<CacheKey, StoredRecord>,
    dry_run: bool,
}

impl Workspace {
    pub fn open(dir: impl Into<PathBuf>, dry_run: bool) -> Result<Self, OrchestratorError> {
        Ok(Self::new(Store::open(dir)?, dry_run))
    }

    pub fn new(store: Store, dry_run: bool) -> Self {
        Self {
            store,
            overlay: HashMap::new(),
            dry_run,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn dir(&self) -> &Path {
        self.store.dir()
    }

    pub fn is_dry_run(&self) -> bool {
        self.dry_run
    }

    pub fn get(&self, key: &CacheKey) -> Option<&StoredRecord> {
        self.overlay.get(key).or_else(|| self.store.get(key))
    }

    fn put(&mut self, key: CacheKey, rec: StoredRecord) -> Result<(), StoreError> {
        if self.dry_run {
            self.overlay.insert(key, rec);
            Ok(())
        } else {
            self.store.put(key, rec)
        }
    }

    fn write_artifact(&self, name: &str, body: &[u8]) -> Result<Option<PathBuf>, StoreError> {
        if self.dry_run {
            Ok(None)
        } else {
            self.store.write_artifact(name, body).map(Some)
        }
    }
}

/// Joins lines, cuts at the first stop artifact, caps the length.
pub fn postprocess_rationale(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .map(String::as_str)
        .chain(["==="])
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s))
        .min()
        .unwrap_or(text.len());
    let joined = text[..cut].split_whitespace().collect::<Vec<_>>().join(" ");
    joined.chars().take(MAX_RATIONALE_CHARS).collect::<String>().trim_end().to_owned()
}

/// Text before the first newline, trimmed.
pub fn postprocess_answer(text: &str) -> String {
    text.split('\n').next().unwrap_or_default().trim().to_owned()
}

/// The answer an in-context example shows. Stage-1 inputs use it too.
fn gold_answer(s: &Sample) -> Option<String> {
    s.answers.most_frequent().map(str::to_owned)
}

struct WorkItem<T> {
    key: CacheKey,
    prompt: Prompt,
    extra: T,
}

enum Outcome {
    Text(String),
    Failed(String),
}

/// Stages the pipeline over one dataset and backend.
pub struct Pipeline<'a> {
    pub cfg: &'a RunConfig,
    pub dataset: &'a Dataset,
    pub seeds: &'a [SeedExample],
    pub client: &'a LlmClient,
    pool: TrainPool,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        dataset: &'a Dataset,
        seeds: &'a [SeedExample],
        client: &'a LlmClient,
    ) -> Self {
        Self {
            cfg,
            dataset,
            seeds,
            client,
            pool: TrainPool::from_dataset(dataset),
        }
    }

    fn model_id(&self) -> &str {
        self.client.model_id()
    }

    fn key(&self, sample: &Sample, stage: PromptStage, prompt: &Prompt) -> CacheKey {
        CacheKey {
            sample_id: sample.id.clone(),
            stage,
            prompt_hash: prompt.rendered_hash().to_owned(),
            model_id: self.model_id().to_owned(),
        }
    }

    fn request(&self, prompt: &Prompt) -> CompletionRequest {
        let dec = match prompt.stage() {
            PromptStage::Stage3Answer => &self.cfg.answer,
            _ => &self.cfg.rationale,
        };
        CompletionRequest {
            prompt_text: prompt.render().to_owned(),
            max_new_tokens: dec.max_new_tokens,
            temperature: self.cfg.temperature,
            stop_sequences: dec.stop.clone(),
            model_id: self.model_id().to_owned(),
        }
    }

    pub fn stage1_prompt(&self, s: &Sample) -> Result<Prompt, PromptError> {
        let examples = self.seeds.iter().map(SeedExample::to_block).collect();
        let input = ExampleBlock::new(s.caption.clone(), s.question.clone(), gold_answer(s), None);
        build_stage1(&self.cfg.heads.stage1, examples, input)
    }

    /// Ranked in-context examples for a sample.
    pub fn select(&self, s: &Sample) -> Result<SelectionResult, RetrievalError> {
        let mut r = select_examples(&s.feature.to_f64(), &self.pool, self.cfg.n_examples)?;
        r.query_id = Some(s.id.clone());
        Ok(r)
    }

    /// Example samples in prompt order.
    fn prompt_order<'s>(&'s self, ids: &[SampleId]) -> Vec<&'s Sample> {
        let mut v: Vec<&Sample> = ids.iter().filter_map(|id| self.dataset.get(id)).collect();
        if self.cfg.example_order == ExampleOrder::AscendingSimilarity {
            v.reverse();
        }
        v
    }

    pub fn stage2_prompt(
        &self,
        s: &Sample,
        ids: &[SampleId],
        train: &HashMap<SampleId, String>,
    ) -> Result<Prompt, OrchestratorError> {
        let mut examples = Vec::with_capacity(ids.len());
        for ex in self.prompt_order(ids) {
            let r = train
                .get(&ex.id)
                .ok_or_else(|| OrchestratorError::MissingTrainRationale(ex.id.clone()))?;
            examples.push(ExampleBlock::new(ex.caption.clone(), ex.question.clone(), None, Some(r.clone())));
        }
        let input = ExampleBlock::new(s.caption.clone(), s.question.clone(), None, None);
        Ok(build_stage2(&self.cfg.heads.stage2, examples, input)?)
    }

    /// With `test_rationale == None` the prompt is the no-rationale ablation.
    pub fn stage3_prompt(
        &self,
        s: &Sample,
        ids: &[SampleId],
        train: &HashMap<SampleId, String>,
        test_rationale: Option<&str>,
    ) -> Result<Prompt, OrchestratorError> {
        let ablation = test_rationale.is_none();
        let mut examples = Vec::with_capacity(ids.len());
        for ex in self.prompt_order(ids) {
            let rationale = if ablation {
                None
            } else {
                Some(
                    train
                        .get(&ex.id)
                        .ok_or_else(|| OrchestratorError::MissingTrainRationale(ex.id.clone()))?
                        .clone(),
                )
            };
            examples.push(ExampleBlock::new(ex.caption.clone(), ex.question.clone(), gold_answer(ex), rationale));
        }
        let input = ExampleBlock::new(
            s.caption.clone(),
            s.question.clone(),
            None,
            test_rationale.map(str::to_owned),
        );
        let head = if ablation {
            &self.cfg.heads.stage3_ablation
        } else {
            &self.cfg.heads.stage3
        };
        Ok(build_stage3(head, examples, input, ablation)?)
    }

    /// Sends the uncached items to the backend and appends results in id order.
    fn execute<T: Sync>(
        &self,
        ws: &mut Workspace,
        report: &mut StageReport,
        items: Vec<WorkItem<T>>,
        finish: impl Fn(&WorkItem<T>, String) -> Result<StoredRecord, String>,
    ) -> Result<(), OrchestratorError> {
        let mut pending = Vec::new();
        for item in items {
            report
                .prompt_hashes
                .insert(item.key.sample_id.clone(), item.key.prompt_hash.clone());
            if ws.get(&item.key).is_some() {
                report.cached += 1;
            } else {
                pending.push(item);
            }
        }
        let calls_before = self.client.call_count();
        for batch in pending.chunks(self.cfg.concurrency.max(1)) {
            let outcomes: Vec<Outcome> = if ws.is_dry_run() {
                batch.iter().map(|_| Outcome::Text(DRY_RUN_TEXT.to_owned())).collect()
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = batch
                        .iter()
                        .map(|item| {
                            let req = self.request(&item.prompt);
                            scope.spawn(move || match self.client.complete(&req) {
                                Ok(resp) => Outcome::Text(resp.text),
                                Err(e) => Outcome::Failed(e.to_string()),
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|_| Outcome::Failed("worker panicked".into())))
                        .collect()
                })
            };
            for (item, outcome) in batch.iter().zip(outcomes) {
                let result = match outcome {
                    Outcome::Text(text) => finish(item, text),
                    Outcome::Failed(msg) => Err(msg),
                };
                match result {
                    Ok(record) => {
                        ws.put(item.key.clone(), record)?;
                        report.written += 1;
                    }
                    Err(message) => {
                        log::warn!("{} {}: {message}", report.stage, item.key.sample_id);
                        report.failures.push(Failure {
                            sample_id: item.key.sample_id.clone(),
                            stage: report.stage,
                            message,
                        });
                    }
                }
            }
        }
        report.backend_calls = self.client.call_count() - calls_before;
        Ok(())
    }

    /// Generates a rationale for every train sample.
    pub fn run_stage1(&self, ws: &mut Workspace) -> Result<StageReport, OrchestratorError> {
        let started = Instant::now();
        if self.seeds.is_empty() {
            return Err(OrchestratorError::NoSeeds);
        }
        let mut report = StageReport::new(PromptStage::Stage1Rationale);
        let mut items = Vec::new();
        for s in self.dataset.train() {
            let prompt = self.stage1_prompt(s)?;
            items.push(WorkItem {
                key: self.key(s, PromptStage::Stage1Rationale, &prompt),
                prompt,
                extra: (),
            });
        }
        let stops = &self.cfg.rationale.stop;
        self.execute(ws, &mut report, items, |item, text| {
            let rationale = postprocess_rationale(&text, stops);
            if rationale.is_empty() {
                return Err("empty rationale".into());
            }
            Ok(StoredRecord::Rationale(RationaleRecord {
                sample_id: item.key.sample_id.clone(),
                stage: RationaleStage::TrainRationale,
                rationale,
                prompt_hash: item.key.prompt_hash.clone(),
                model_id: item.key.model_id.clone(),
                created_at: Utc::now(),
                example_ids: Vec::new(),
            }))
        })?;
        report.elapsed_ms = started.elapsed().as_millis() as u64;
        Ok(report)
    }

    /// Stage-1 rationales currently in `ws` for the current seeds and head.
    pub fn train_rationales(&self, ws: &Workspace) -> Result<HashMap<SampleId, String>, OrchestratorError> {
        let mut out = HashMap::new();
        for s in self.dataset.train() {
            let prompt = self.stage1_prompt(s)?;
            let key = self.key(s, PromptStage::Stage1Rationale, &prompt);
            if let Some(r) = ws.get(&key).and_then(StoredRecord::as_rationale) {
                out.insert(s.id.clone(), r.rationale.clone());
            } else if ws.is_dry_run() {
                out.insert(s.id.clone(), DRY_RUN_TEXT.to_owned());
            }
        }
        Ok(out)
    }

    /// Selects examples and generates a rationale for every test sample.
    pub fn run_stage2(
        &self,
        train: &HashMap<SampleId, String>,
        ws: &mut Workspace,
    ) -> Result<StageReport, OrchestratorError> {
        let started = Instant::now();
        let mut report = StageReport::new(PromptStage::Stage2Rationale);
        let mut items = Vec::new();
        for s in self.dataset.test() {
            let ids = self.select(s)?.ids();
            let prompt = self.stage2_prompt(s, &ids, train)?;
            items.push(WorkItem {
                key: self.key(s, PromptStage::Stage2Rationale, &prompt),
                prompt,
                extra: ids,
            });
        }
        let stops = &self.cfg.rationale.stop;
        self.execute(ws, &mut report, items, |item, text| {
            let rationale = postprocess_rationale(&text, stops);
            if rationale.is_empty() {
                return Err("empty rationale".into());
            }
            Ok(StoredRecord::Rationale(RationaleRecord {
                sample_id: item.key.sample_id.clone(),
                stage: RationaleStage::TestRationale,
                rationale,
                prompt_hash: item.key.prompt_hash.clone(),
                model_id: item.key.model_id.clone(),
                created_at: Utc::now(),
                example_ids: item.extra.clone(),
            }))
        })?;
        report.elapsed_ms = started.elapsed().as_millis() as u64;
        Ok(report)
    }

    /// The stored stage-2 record for a test sample, located by rebuilding
    /// its stage-2 prompt.
    pub fn stage2_record<'w>(
        &self,
        s: &Sample,
        train: &HashMap<SampleId, String>,
        ws: &'w Workspace,
    ) -> Result<Option<&'w RationaleRecord>, OrchestratorError> {
        let ids = self.select(s)?.ids();
        let prompt = self.stage2_prompt(s, &ids, train)?;
        let key = self.key(s, PromptStage::Stage2Rationale, &prompt);
        Ok(ws.get(&key).and_then(StoredRecord::as_rationale))
    }

    /// Predicts an answer for every test sample.
    ///
    /// Reuses each sample's stage-2 example ids verbatim. In ablation mode no
    /// stage-2 record is needed and rationales are left out of the prompt.
    pub fn run_stage3(
        &self,
        train: &HashMap<SampleId, String>,
        ws: &mut Workspace,
    ) -> Result<StageReport, OrchestratorError> {
        let started = Instant::now();
        let ablation = self.cfg.ablation_no_rationale;
        let mut report = StageReport::new(PromptStage::Stage3Answer);
        let mut items = Vec::new();
        for s in self.dataset.test() {
            let (ids, rationale) = if ablation {
                (self.select(s)?.ids(), None)
            } else {
                match self.stage2_record(s, train, ws)? {
                    Some(r) => (r.example_ids.clone(), Some(r.rationale.clone())),
                    None if ws.is_dry_run() => (self.select(s)?.ids(), Some(DRY_RUN_TEXT.to_owned())),
                    None => {
                        report.failures.push(Failure {
                            sample_id: s.id.clone(),
                            stage: PromptStage::Stage3Answer,
                            message: "no stage-2 rationale".into(),
                        });
                        continue;
                    }
                }
            };
            let prompt = self.stage3_prompt(s, &ids, train, rationale.as_deref())?;
            items.push(WorkItem {
                key: self.key(s, PromptStage::Stage3Answer, &prompt),
                prompt,
                extra: (ids, rationale),
            });
        }
        self.execute(ws, &mut report, items, |item, text| {
            let answer = postprocess_answer(&text);
            if answer.is_empty() {
                return Err("empty answer".into());
            }
            Ok(StoredRecord::Prediction(PredictionRecord {
                sample_id: item.key.sample_id.clone(),
                answer,
                rationale_used: item.extra.1.clone(),
                example_ids: item.extra.0.clone(),
                prompt_hash: item.key.prompt_hash.clone(),
                model_id: item.key.model_id.clone(),
            }))
        })?;
        report.elapsed_ms = started.elapsed().as_millis() as u64;
        Ok(report)
    }

    /// Predictions for the prompts the last stage-3 report built.
    pub fn collect_predictions(&self, stage3: &StageReport, ws: &Workspace) -> Vec<PredictionRecord> {
        stage3
            .prompt_hashes
            .iter()
            .filter_map(|(id, hash)| {
                let key = CacheKey {
                    sample_id: id.clone(),
                    stage: PromptStage::Stage3Answer,
                    prompt_hash: hash.clone(),
                    model_id: self.model_id().to_owned(),
                };
                ws.get(&key).and_then(StoredRecord::as_prediction).cloned()
            })
            .collect()
    }

    /// Stage 1 into `base`, stages 2 and 3 into `run` (which may be `None` to
    /// use `base` for everything).
    pub fn run_all(
        &self,
        base: &mut Workspace,
        run: Option<&mut Workspace>,
    ) -> Result<RunSummary, OrchestratorError> {
        let started = Instant::now();
        let stage1 = self.run_stage1(base)?;
        let train = self.train_rationales(base)?;
        let ws: &mut Workspace = match run {
            Some(ws) => ws,
            None => base,
        };
        let stage2 = if self.cfg.ablation_no_rationale {
            None
        } else {
            Some(self.run_stage2(&train, ws)?)
        };
        let stage3 = self.run_stage3(&train, ws)?;
        let predictions = self.collect_predictions(&stage3, ws);

        let failures: Vec<Failure> = stage1
            .failures
            .iter()
            .chain(stage2.iter().flat_map(|s| &s.failures))
            .chain(&stage3.failures)
            .cloned()
            .collect();
        let (predictions_path, failures_path) = self.write_artifacts(ws, &predictions, &failures)?;

        let unpredicted = self.dataset.test().count() - predictions.len();
        Ok(RunSummary {
            stage1,
            stage2,
            stage3,
            predictions,
            failures,
            unpredicted,
            predictions_path,
            failures_path,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Writes the predictions export, the failure report and the manifest.
    /// Returns the first two paths, or `None` in dry runs.
    pub fn write_artifacts(
        &self,
        ws: &Workspace,
        predictions: &[PredictionRecord],
        failures: &[Failure],
    ) -> Result<(Option<PathBuf>, Option<PathBuf>), OrchestratorError> {
        let p = ws.write_artifact(PREDICTIONS_EXPORT, to_jsonl(predictions).as_bytes())?;
        let f = ws.write_artifact(FAILURES_REPORT, to_jsonl(failures).as_bytes())?;
        ws.write_artifact(MANIFEST, self.manifest().as_bytes())?;
        Ok((p, f))
    }

    /// Config snapshot plus content hashes of the dataset and seeds.
    pub fn manifest(&self) -> String {
        let mut seeds = ContentHasher::new();
        for s in self.seeds {
            seeds.update(serde_json::to_string(s).expect("serializable")).update("\n");
        }
        let mut out = self.cfg.to_kv();
        let _ = writeln!(out, "# dataset.name = {}", self.dataset.name());
        let _ = writeln!(out, "# dataset.content_hash = {}", self.dataset.content_hash());
        let _ = writeln!(out, "# seeds.content_hash = {}", seeds.finish());
        let _ = writeln!(out, "# model_id = {}", self.model_id());
        out
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub stage1: StageReport,
    pub stage2: Option<StageReport>,
    pub stage3: StageReport,
    #[serde(skip)]
    pub predictions: Vec<PredictionRecord>,
    pub failures: Vec<Failure>,
    /// Test samples without a prediction at the end of the run.
    pub unpredicted: usize,
    pub predictions_path: Option<PathBuf>,
    pub failures_path: Option<PathBuf>,
    pub elapsed_ms: u64,
}

impl RunSummary {
    pub fn backend_calls(&self) -> u64 {
        self.stage1.backend_calls
            + self.stage2.as_ref().map_or(0, |s| s.backend_calls)
            + self.stage3.backend_calls
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.unpredicted == 0
    }
}

/// Dataset, seeds and client as configured.
pub struct Loaded {
    pub dataset: Dataset,
    pub seeds: Vec<SeedExample>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Loaded, OrchestratorError> {
    let samples = cfg.samples.as_ref().ok_or(ConfigError::Missing("dataset.samples"))?;
    let features = cfg.features.as_ref().ok_or(ConfigError::Missing("dataset.features"))?;
    let dataset = load_dataset(samples, features)?;
    let seeds = match &cfg.seeds {
        Some(p) => load_seeds(p)?,
        None => default_seeds(),
    };
    Ok(Loaded { dataset, seeds })
}

/// Runs stages 1 to 3 into the configured store.
pub fn run_pipeline(
    cfg: &RunConfig,
    dataset: &Dataset,
    seeds: &[SeedExample],
    client: &LlmClient,
    dry_run: bool,
) -> Result<RunSummary, OrchestratorError> {
    let mut ws = Workspace::open(&cfg.store, dry_run)?;
    Pipeline::new(cfg, dataset, seeds, client).run_all(&mut ws, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRationale,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRationale => "no_rationale",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub variant: Variant,
    pub accuracy: f64,
    pub backend_calls: u64,
    pub store: PathBuf,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub csv_path: Option<PathBuf>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,variant,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.4}", r.n, r.variant.as_str(), r.accuracy);
        }
        out
    }
}

/// Directory of one sweep cell under the base store.
pub fn sweep_namespace(base: &Path, n: usize, variant: Variant) -> PathBuf {
    base.join("sweep").join(format!("n{n}-{}", variant.as_str()))
}

/// Runs the pipeline once per `n` (and per variant), each cell in its own
/// store namespace; stage-1 rationales are shared from the base store.
pub fn run_sweep(
    cfg: &RunConfig,
    dataset: &Dataset,
    seeds: &[SeedExample],
    client: &LlmClient,
    n_values: &[usize],
    with_ablation: bool,
    dry_run: bool,
) -> Result<SweepResult, OrchestratorError> {
    let mut base = Workspace::open(&cfg.store, dry_run)?;
    let variants: &[Variant] = if with_ablation {
        &[Variant::Full, Variant::NoRationale]
    } else {
        &[Variant::Full]
    };
    let mut rows = Vec::new();
    for &variant in variants {
        for &n in n_values {
            let mut cell = cfg.clone();
            cell.n_examples = n;
            cell.ablation_no_rationale = variant == Variant::NoRationale;
            if n == 0 {
                return Err(ConfigError::Value {
                    key: "n_values".into(),
                    message: "must be at least 1".into(),
                }
                .into());
            }
            let dir = sweep_namespace(&cfg.store, n, variant);
            let mut ws = Workspace::open(&dir, dry_run)?;
            let before = client.call_count();
            let summary = Pipeline::new(&cell, dataset, seeds, client).run_all(&mut base, Some(&mut ws))?;
            let report = evaluate(&summary.predictions, dataset)?;
            rows.push(SweepRow {
                n,
                variant,
                accuracy: report.mean_accuracy,
                backend_calls: client.call_count() - before,
                store: dir,
                complete: summary.is_complete(),
            });
        }
    }
    let mut result = SweepResult { rows, csv_path: None };
    result.csv_path = base.write_artifact(SWEEP_CSV, result.to_csv().as_bytes())?;
    Ok(result)
}

/// Content hash used for prompt identity in reports.
pub fn prompt_hash(text: &str) -> String {
    content_hash(text)
}
