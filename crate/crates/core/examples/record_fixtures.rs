//! Regenerates `fixtures/e2e/scripted.jsonl`.
//!
//! Runs the full and the no-rationale pipeline over the 20-sample fixture
//! with a synthetic backend and records every completion. The synthetic
//! backend answers correctly when the prompt hash starts with an even hex
//! digit and says "unknown" otherwise, so the fixture scores below 100%.
//!
//!     cargo run -p plrh-core --example record_fixtures

use std::path::Path;
use std::sync::Arc;

use plrh_core::config::RunConfig;
use plrh_core::llm_client::{
    Backend, CompletionRequest, LlmClient, LlmError, OracleMock, RawCompletion, RecordingBackend,
    RetryPolicy,
};
use plrh_core::orchestrator::{load_inputs, Pipeline, Workspace};

struct Synthetic(OracleMock);

impl Backend for Synthetic {
    fn model_id(&self) -> &str {
        self.0.model_id()
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let hash = req.prompt_hash();
        let even = u8::from_str_radix(&hash[..1], 16).unwrap().is_multiple_of(2);
        if req.prompt_text.ends_with("\nAnswer:") && !even {
            return Ok(RawCompletion::stop(" unknown\n"));
        }
        self.0.complete_raw(req)
    }
}

fn main() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut cfg = RunConfig::from_file(&fixtures.join("run.conf")).unwrap();
    let inputs = load_inputs(&cfg).unwrap();
    let synthetic = Synthetic(OracleMock::new(cfg.backend.model_id.clone(), &inputs.dataset));
    let recorder = Arc::new(RecordingBackend::new(synthetic));
    let client = LlmClient::new(Box::new(recorder.clone()), RetryPolicy::no_backoff(1));

    for ablation in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        cfg.ablation_no_rationale = ablation;
        let mut ws = Workspace::open(dir.path(), false).unwrap();
        let p = Pipeline::new(&cfg, &inputs.dataset, &inputs.seeds, &client);
        let summary = p.run_all(&mut ws, None).unwrap();
        assert!(summary.is_complete(), "{:?}", summary.failures);
    }
    let out = fixtures.join("e2e").join("scripted.jsonl");
    let n = recorder.write_fixture(&out).unwrap();
    println!("wrote {n} completions to {}", out.display());
}
