#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use reflectforge::config::PipelineConfig;
use reflectforge::corpus::{QARecord, Source};
use reflectforge::gateway::{Backend, ChatRequest, ChatResponse, FnBackend, Gateway, GatewayError, RetryPolicy};
use reflectforge::pinpoint::{Pathway, Pinpoint, PinpointDetail};
use reflectforge::pipeline::{Pipeline, RunOptions};
use reflectforge::reflection::ReflectionDraft;
use reflectforge::trajectory::{assemble_reflective, ReflectionPair, Trajectory};

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Mock-backend config over the bundled fixtures, writing under `root`.
pub fn fixture_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&workspace_root().join("configs/mock.toml")).expect("mock config");
    cfg.paths.workdir = root.join("work");
    cfg.paths.outputs = root.join("out");
    cfg
}

pub fn run_fixture_pipeline(root: &Path) -> Pipeline {
    let p = Pipeline::new(fixture_config(root)).expect("valid config");
    p.run(&RunOptions::default()).expect("pipeline run");
    p
}

pub fn gateway<F>(f: F) -> Gateway
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync + 'static,
{
    backend_gateway(FnBackend::new(f), 8)
}

pub fn backend_gateway(b: impl Backend + 'static, max_in_flight: usize) -> Gateway {
    Gateway::new(
        Arc::new(b),
        max_in_flight,
        RetryPolicy {
            max_attempts: 1,
            base_backoff_ms: 0,
        },
    )
}

/// Tag field `i` of a request (fields are `|`-separated).
pub fn tag_field(req: &ChatRequest, i: usize) -> &str {
    req.tag.split('|').nth(i).unwrap_or("")
}

pub fn mc_record(id: &str, gold: char) -> QARecord {
    QARecord {
        id: id.into(),
        source: Source::Multichoice,
        question: format!("Item {id}: which agent is first line for uncomplicated hypertension?"),
        options: Some(
            [('A', "Lisinopril"), ('B', "Propranolol"), ('C', "Hydralazine"), ('D', "Clonidine")]
                .into_iter()
                .map(|(l, t)| (l, t.to_string()))
                .collect(),
        ),
        gold: gold.to_string(),
        reasoning: "ACE inhibitors reduce mortality. They are well tolerated.".into(),
    }
}

/// A sentence-pathway draft whose record must be `mc_record(record_id, _)`.
pub fn rg1_draft(id: &str, record_id: &str) -> ReflectionDraft {
    let base = Trajectory::new(
        record_id,
        &["The patient has stage 1 hypertension.", "Option B, propranolol, is the best first step."],
        "Therefore, the answer is (B).",
    )
    .unwrap();
    let erroneous = base.with_error(1, "Option B, propranolol, is the best first step.").unwrap();
    let reflection = ReflectionPair {
        question: "Do beta blockers reduce outcomes as first line therapy?".into(),
        answer: "No, other classes are preferred first.".into(),
        pinpoint_index: 1,
    };
    let corrected = "Option A, lisinopril, is the best first step.";
    let reflective = assemble_reflective(&base, 1, &erroneous.steps[1].text, &reflection, corrected).unwrap();
    ReflectionDraft {
        id: id.into(),
        record_id: record_id.into(),
        source: Source::Multichoice,
        pinpoint: Pinpoint {
            id: format!("{record_id}#rg1-0"),
            record_id: record_id.into(),
            pathway: Pathway::Rg1,
            step_index: 1,
            erroneous_text: erroneous.steps[1].text.clone(),
            detail: PinpointDetail::Sentence {
                sampled_answer: erroneous.render(),
                wrong_option: 'B',
            },
            transcript: Vec::new(),
        },
        erroneous,
        reflection,
        corrected: corrected.into(),
        reflective,
        transcript: Vec::new(),
    }
}
