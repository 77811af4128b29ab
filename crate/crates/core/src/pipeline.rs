//! Stage orchestration: ingest, pinpoint, reflect, filter, sample, emit.
//!
//! Each stage reads the previous stage's artifact from the work directory and
//! writes its own, sorted and without timestamps, so reruns with the same
//! seed and backend produce identical bytes. Long stages append finished
//! chunks to a `.partial.jsonl` checkpoint; `resume` skips items already
//! recorded there.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{load_consultations, load_multichoice, preprocess, HeuristicRelevance, LlmRelevance, QARecord, RelevanceMode, Source};
use crate::emit::{self, read_jsonl, stats_for_file, training_file_name, write_jsonl, EmitError};
use crate::eval::{evaluate, write_predictions_csv, EvalResult};
use crate::filter::{evaluate_instance, summarize, FilterVerdict};
use crate::gateway::{Backend, BackendConfig, BackendKind, Gateway, ScriptedMock, SimulatedModel};
use crate::par;
use crate::pinpoint::{rg1_generate_pinpoint, rg2_generate_pinpoints, PinpointArtifact, PinpointError};
use crate::prompts::PromptCatalog;
use crate::reflection::{build_reflection, ReflectionDraft};
use crate::seed;

pub const RECORDS: &str = "records.jsonl";
pub const PREPROCESS_REPORT: &str = "preprocess_report.json";
pub const PINPOINTS: &str = "pinpoints.jsonl";
pub const PINPOINT_REPORT: &str = "pinpoint_report.json";
pub const DRAFTS: &str = "drafts.jsonl";
pub const REFLECT_REPORT: &str = "reflect_report.json";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const RETAINED: &str = "retained.jsonl";
pub const FILTER_SUMMARY: &str = "filter_summary.json";
pub const SAMPLED: &str = "sampled.jsonl";
pub const SAMPLE_REPORT: &str = "sample_report.json";
pub const EMIT_REPORT: &str = "emit_report.json";
pub const RUN_REPORT: &str = "run_report.json";

pub fn stats_file_name(mode: crate::trajectory::AblationMode) -> String {
    format!("stats_{mode}.json")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {msg}")]
    StageFailure { stage: Stage, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Pinpoint,
    Reflect,
    Filter,
    Sample,
    Emit,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Pinpoint,
        Stage::Reflect,
        Stage::Filter,
        Stage::Sample,
        Stage::Emit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Pinpoint => "pinpoint",
            Stage::Reflect => "reflect",
            Stage::Filter => "filter",
            Stage::Sample => "sample",
            Stage::Emit => "emit",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub stages: Vec<Stage>,
    pub resume: bool,
    pub dry_run: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            resume: false,
            dry_run: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub input: usize,
    pub output: usize,
    pub artifact: PathBuf,
}

fn fail(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |msg| PipelineError::StageFailure { stage, msg }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, format!("{text}\n")).map_err(|e| format!("{}: {e}", path.display()))
}

fn emit_msg(e: EmitError) -> String {
    e.to_string()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<O> {
    key: String,
    out: O,
}

/// Runs `f` over `items` in parallel chunks, appending each finished chunk
/// to `partial`. With `resume`, keys already in `partial` are not rerun.
/// Returns outputs in input order and removes the checkpoint on success.
fn run_chunked<I, O, K, F>(
    partial: &Path,
    items: &[I],
    key: K,
    chunk: usize,
    resume: bool,
    f: F,
) -> Result<Vec<O>, String>
where
    I: Sync,
    O: Serialize + DeserializeOwned + Send,
    K: Fn(&I) -> String,
    F: Fn(&I) -> Result<O, String> + Sync,
{
    let mut done: HashMap<String, O> = HashMap::new();
    if resume && partial.exists() {
        let file = std::fs::File::open(partial).map_err(|e| format!("{}: {e}", partial.display()))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| e.to_string())?;
            // a torn final line from an interrupted write is rerun
            if let Ok(cp) = serde_json::from_str::<Checkpoint<O>>(&line) {
                done.insert(cp.key, cp.out);
            }
        }
        log::info!("resuming: {} items already checkpointed in {}", done.len(), partial.display());
    } else if partial.exists() {
        std::fs::remove_file(partial).map_err(|e| e.to_string())?;
    }
    if let Some(dir) = partial.parent() {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    }
    let todo: Vec<&I> = items.iter().filter(|i| !done.contains_key(&key(i))).collect();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(partial)
        .map_err(|e| format!("{}: {e}", partial.display()))?;
    for batch in todo.chunks(chunk.max(1)) {
        let outs = par::map(batch, |i| f(i));
        let mut buf = String::new();
        let mut finished = Vec::with_capacity(batch.len());
        for (i, out) in batch.iter().zip(outs) {
            let out = out?;
            let cp = Checkpoint { key: key(i), out };
            buf.push_str(&serde_json::to_string(&cp).map_err(|e| e.to_string())?);
            buf.push('\n');
            finished.push(cp);
        }
        file.write_all(buf.as_bytes()).map_err(|e| e.to_string())?;
        file.flush().map_err(|e| e.to_string())?;
        for cp in finished {
            done.insert(cp.key, cp.out);
        }
    }
    drop(file);
    let out = items
        .iter()
        .map(|i| done.remove(&key(i)).ok_or_else(|| format!("missing output for {}", key(i))))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::remove_file(partial).map_err(|e| e.to_string())?;
    Ok(out)
}

/// Gateway for a backend config. Mock backends use the script file when one
/// is configured and the simulated model over `records` otherwise.
pub fn build_gateway(cfg: &BackendConfig, records: &[QARecord], seed: u64) -> Result<Gateway, String> {
    let backend: Arc<dyn Backend> = match (cfg.kind, &cfg.mock_script) {
        (BackendKind::Http, _) => return Gateway::http(cfg).map_err(|e| e.to_string()),
        (BackendKind::Mock, Some(path)) => Arc::new(ScriptedMock::from_json_file(path, seed).map_err(|e| e.to_string())?),
        (BackendKind::Mock, None) => Arc::new(SimulatedModel::new(records.iter().cloned(), seed)),
    };
    Gateway::with_backend(backend, cfg).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PinpointOutcome {
    pub record_id: String,
    pub artifacts: Vec<PinpointArtifact>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub unparsed_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PinpointReport {
    pub records: usize,
    pub records_with_pinpoints: usize,
    pub pinpoints: usize,
    pub by_pathway: BTreeMap<String, usize>,
    /// Histogram of pinpoints per record.
    pub per_record: BTreeMap<usize, usize>,
    pub errors: BTreeMap<String, usize>,
    pub unparsed_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DraftOutcome {
    pub pinpoint_id: String,
    pub draft: Option<ReflectionDraft>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectReport {
    pub pinpoints: usize,
    pub drafts: usize,
    pub failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub available: BTreeMap<String, usize>,
    pub sampled: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReports {
    pub consultations: Option<crate::corpus::PreprocessReport>,
    pub multichoice: Option<crate::corpus::PreprocessReport>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub prompts: PromptCatalog,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompts = match &config.paths.prompts {
            Some(dir) => PromptCatalog::load_dir(dir).map_err(|e| ConfigError::Invalid {
                field: "paths.prompts".into(),
                msg: e.to_string(),
            })?,
            None => PromptCatalog::default(),
        };
        Ok(Self { config, prompts })
    }

    pub fn work(&self, name: &str) -> PathBuf {
        self.config.paths.workdir.join(name)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.config.paths.outputs.join(name)
    }

    fn records(&self, stage: Stage) -> Result<Vec<QARecord>, PipelineError> {
        read_jsonl(&self.work(RECORDS)).map_err(|e| fail(stage)(format!("{e} (run the ingest stage first)")))
    }

    fn lookup(records: &[QARecord]) -> HashMap<&str, &QARecord> {
        records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    /// Runs the requested stages in pipeline order.
    pub fn run(&self, opts: &RunOptions) -> Result<Vec<StageSummary>, PipelineError> {
        let wanted: BTreeSet<Stage> = opts.stages.iter().copied().collect();
        if opts.dry_run {
            return self.plan(&wanted);
        }
        let mut out = Vec::new();
        for stage in wanted {
            log::info!("stage {stage}");
            let s = match stage {
                Stage::Ingest => self.ingest()?,
                Stage::Pinpoint => self.pinpoint(opts.resume)?,
                Stage::Reflect => self.reflect(opts.resume)?,
                Stage::Filter => self.filter(opts.resume)?,
                Stage::Sample => self.sample()?,
                Stage::Emit => self.emit()?,
            };
            log::info!("stage {stage}: {} in, {} out", s.input, s.output);
            out.push(s);
        }
        Ok(out)
    }

    /// Validates inputs without calling any backend.
    fn plan(&self, wanted: &BTreeSet<Stage>) -> Result<Vec<StageSummary>, PipelineError> {
        let p = &self.config.paths;
        if wanted.contains(&Stage::Ingest) {
            if p.consultations.is_none() && p.multichoice.is_none() {
                return Err(ConfigError::Invalid {
                    field: "paths".into(),
                    msg: "set paths.consultations and/or paths.multichoice".into(),
                }
                .into());
            }
            for path in p.consultations.iter().chain(&p.multichoice) {
                if !path.exists() {
                    return Err(ConfigError::Invalid {
                        field: "paths".into(),
                        msg: format!("{} does not exist", path.display()),
                    }
                    .into());
                }
            }
        }
        Ok(wanted
            .iter()
            .map(|&stage| StageSummary {
                stage,
                input: 0,
                output: 0,
                artifact: PathBuf::new(),
            })
            .collect())
    }

    pub fn ingest(&self) -> Result<StageSummary, PipelineError> {
        let st = Stage::Ingest;
        let p = &self.config.paths;
        if p.consultations.is_none() && p.multichoice.is_none() {
            return Err(ConfigError::Invalid {
                field: "paths".into(),
                msg: "set paths.consultations and/or paths.multichoice".into(),
            }
            .into());
        }
        let mut kept = Vec::new();
        let mut reports = PreprocessReports::default();
        let mut input = 0;
        let sets = [
            (p.consultations.as_ref(), Source::Consultation),
            (p.multichoice.as_ref(), Source::Multichoice),
        ];
        for (path, source) in sets {
            let Some(path) = path else { continue };
            let records = match source {
                Source::Consultation => load_consultations(path, &self.config.corpus.consultation),
                Source::Multichoice => load_multichoice(path, &self.config.corpus.multichoice),
            }
            .map_err(|e| fail(st)(e.to_string()))?;
            input += records.len();
            let heuristic = HeuristicRelevance {
                min_keyword_hits: self.config.preprocess.min_keyword_hits,
            };
            let (k, report) = match self.config.preprocess.relevance {
                RelevanceMode::Heuristic => preprocess(records, &self.config.preprocess, &heuristic),
                RelevanceMode::Llm => {
                    let gw = build_gateway(&self.config.construction, &records, self.config.seed).map_err(fail(st))?;
                    let judge = LlmRelevance {
                        gateway: &gw,
                        prompts: &self.prompts,
                        fallback: heuristic,
                    };
                    preprocess(records, &self.config.preprocess, &judge)
                }
            };
            match source {
                Source::Consultation => reports.consultations = Some(report),
                Source::Multichoice => reports.multichoice = Some(report),
            }
            kept.extend(k);
        }
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        write_jsonl(&self.work(RECORDS), &kept).map_err(|e| fail(st)(emit_msg(e)))?;
        write_json(&self.work(PREPROCESS_REPORT), &reports).map_err(fail(st))?;
        Ok(StageSummary {
            stage: st,
            input,
            output: kept.len(),
            artifact: self.work(RECORDS),
        })
    }

    pub fn pinpoint(&self, resume: bool) -> Result<StageSummary, PipelineError> {
        let st = Stage::Pinpoint;
        let records = self.records(st)?;
        let gw = build_gateway(&self.config.construction, &records, self.config.seed).map_err(fail(st))?;
        let cfg = &self.config.pinpoint;
        let outcomes = run_chunked(
            &self.work("pinpoints.partial.jsonl"),
            &records,
            |r| r.id.clone(),
            self.config.chunk_size,
            resume,
            |r| {
                let mut o = PinpointOutcome {
                    record_id: r.id.clone(),
                    ..Default::default()
                };
                let found = match r.source {
                    Source::Multichoice => rg1_generate_pinpoint(r, &cfg.rg1, &gw, &self.prompts).map(|x| {
                        o.unparsed_samples = x.unparsed;
                        x.found
                    }),
                    Source::Consultation => rg2_generate_pinpoints(r, &cfg.rg2, &gw, &self.prompts).map(|x| x.found),
                };
                match found {
                    Ok(found) => {
                        o.artifacts = found
                            .into_iter()
                            .map(|(erroneous, pinpoint)| PinpointArtifact { pinpoint, erroneous })
                            .collect()
                    }
                    Err(PinpointError::Prompt(e)) => return Err(e.to_string()),
                    Err(e) => o.error = Some(pinpoint_error_kind(&e).to_string()),
                }
                Ok(o)
            },
        )
        .map_err(fail(st))?;

        let mut report = PinpointReport {
            records: records.len(),
            ..Default::default()
        };
        let mut artifacts = Vec::new();
        for o in outcomes {
            report.unparsed_samples += o.unparsed_samples;
            *report.per_record.entry(o.artifacts.len()).or_default() += 1;
            if let Some(e) = o.error {
                *report.errors.entry(e).or_default() += 1;
            }
            if !o.artifacts.is_empty() {
                report.records_with_pinpoints += 1;
            }
            for a in o.artifacts {
                *report.by_pathway.entry(a.pinpoint.pathway.to_string()).or_default() += 1;
                artifacts.push(a);
            }
        }
        report.pinpoints = artifacts.len();
        write_jsonl(&self.work(PINPOINTS), &artifacts).map_err(|e| fail(st)(emit_msg(e)))?;
        write_json(&self.work(PINPOINT_REPORT), &report).map_err(fail(st))?;
        Ok(StageSummary {
            stage: st,
            input: records.len(),
            output: artifacts.len(),
            artifact: self.work(PINPOINTS),
        })
    }

    pub fn reflect(&self, resume: bool) -> Result<StageSummary, PipelineError> {
        let st = Stage::Reflect;
        let records = self.records(st)?;
        let by_id = Self::lookup(&records);
        let artifacts: Vec<PinpointArtifact> = read_jsonl(&self.work(PINPOINTS)).map_err(|e| fail(st)(emit_msg(e)))?;
        let gw = build_gateway(&self.config.construction, &records, self.config.seed).map_err(fail(st))?;
        let outcomes = run_chunked(
            &self.work("drafts.partial.jsonl"),
            &artifacts,
            |a| a.pinpoint.id.clone(),
            self.config.chunk_size,
            resume,
            |a| {
                let Some(record) = by_id.get(a.pinpoint.record_id.as_str()) else {
                    return Err(format!("pinpoint {} names unknown record", a.pinpoint.id));
                };
                Ok(match build_reflection(record, a, &self.config.reflect, &gw, &self.prompts) {
                    Ok(d) => DraftOutcome {
                        pinpoint_id: a.pinpoint.id.clone(),
                        draft: Some(d),
                        error_kind: None,
                    },
                    Err(crate::reflection::ReflectionError::Prompt(e)) => return Err(e.to_string()),
                    Err(e) => DraftOutcome {
                        pinpoint_id: a.pinpoint.id.clone(),
                        draft: None,
                        error_kind: Some(e.kind().to_string()),
                    },
                })
            },
        )
        .map_err(fail(st))?;
        let mut report = ReflectReport {
            pinpoints: artifacts.len(),
            ..Default::default()
        };
        let mut drafts = Vec::new();
        for o in outcomes {
            match (o.draft, o.error_kind) {
                (Some(d), _) => drafts.push(d),
                (None, Some(k)) => *report.failures.entry(k).or_default() += 1,
                (None, None) => {}
            }
        }
        report.drafts = drafts.len();
        write_jsonl(&self.work(DRAFTS), &drafts).map_err(|e| fail(st)(emit_msg(e)))?;
        write_json(&self.work(REFLECT_REPORT), &report).map_err(fail(st))?;
        Ok(StageSummary {
            stage: st,
            input: artifacts.len(),
            output: drafts.len(),
            artifact: self.work(DRAFTS),
        })
    }

    pub fn filter(&self, resume: bool) -> Result<StageSummary, PipelineError> {
        let st = Stage::Filter;
        let records = self.records(st)?;
        let by_id = Self::lookup(&records);
        let drafts: Vec<ReflectionDraft> = read_jsonl(&self.work(DRAFTS)).map_err(|e| fail(st)(emit_msg(e)))?;
        let gw = build_gateway(&self.config.filter_model, &records, self.config.seed).map_err(fail(st))?;
        let params = &self.config.filter;
        let verdicts: Vec<FilterVerdict> = run_chunked(
            &self.work("verdicts.partial.jsonl"),
            &drafts,
            |d| d.id.clone(),
            self.config.chunk_size,
            resume,
            |d| {
                let record = by_id
                    .get(d.record_id.as_str())
                    .ok_or_else(|| format!("draft {} names unknown record", d.id))?;
                evaluate_instance(record, d, params, &gw, &self.prompts).map_err(|e| e.to_string())
            },
        )
        .map_err(fail(st))?;

        let (retained, summary) = summarize(&drafts, &verdicts, params);
        write_jsonl(&self.work(VERDICTS), &verdicts).map_err(|e| fail(st)(emit_msg(e)))?;
        write_jsonl(&self.work(RETAINED), &retained).map_err(|e| fail(st)(emit_msg(e)))?;
        write_json(&self.work(FILTER_SUMMARY), &summary).map_err(fail(st))?;
        Ok(StageSummary {
            stage: st,
            input: drafts.len(),
            output: retained.len(),
            artifact: self.work(RETAINED),
        })
    }

    /// Draws up to the configured number of records per source from the
    /// retained drafts with a seeded shuffle.
    pub fn sample(&self) -> Result<StageSummary, PipelineError> {
        let st = Stage::Sample;
        let drafts: Vec<ReflectionDraft> = read_jsonl(&self.work(RETAINED)).map_err(|e| fail(st)(emit_msg(e)))?;
        let mut ids: BTreeMap<Source, BTreeSet<&str>> = BTreeMap::new();
        for d in &drafts {
            ids.entry(d.source).or_default().insert(d.record_id.as_str());
        }
        let mut report = SampleReport::default();
        let mut chosen: BTreeSet<&str> = BTreeSet::new();
        for (source, set) in &ids {
            let mut pool: Vec<&str> = set.iter().copied().collect();
            let cap = match source {
                Source::Consultation => self.config.sample.consultations,
                Source::Multichoice => self.config.sample.multichoice,
            };
            pool.shuffle(&mut seed::rng(self.config.seed, &["sample", source.as_str()]));
            pool.truncate(cap);
            report.available.insert(source.as_str().to_string(), set.len());
            report.sampled.insert(source.as_str().to_string(), pool.len());
            chosen.extend(pool);
        }
        let sampled: Vec<&ReflectionDraft> = drafts.iter().filter(|d| chosen.contains(d.record_id.as_str())).collect();
        write_jsonl(&self.work(SAMPLED), &sampled).map_err(|e| fail(st)(emit_msg(e)))?;
        write_json(&self.work(SAMPLE_REPORT), &report).map_err(fail(st))?;
        Ok(StageSummary {
            stage: st,
            input: drafts.len(),
            output: sampled.len(),
            artifact: self.work(SAMPLED),
        })
    }

    pub fn emit(&self) -> Result<StageSummary, PipelineError> {
        let st = Stage::Emit;
        let records = self.records(st)?;
        let by_id = Self::lookup(&records);
        let drafts: Vec<ReflectionDraft> = read_jsonl(&self.work(SAMPLED)).map_err(|e| fail(st)(emit_msg(e)))?;
        let out_dir = &self.config.paths.outputs;
        let lookup = |id: &str| by_id.get(id).copied();
        let reports = emit::emit_all(&drafts, lookup, &self.config.emit, out_dir).map_err(|e| fail(st)(emit_msg(e)))?;
        for &mode in &self.config.emit.modes {
            let stats = stats_for_file(&out_dir.join(training_file_name(mode)), &self.config.emit.tokens)
                .map_err(|e| fail(st)(emit_msg(e)))?;
            write_json(&out_dir.join(stats_file_name(mode)), &stats).map_err(fail(st))?;
        }
        write_json(&out_dir.join(EMIT_REPORT), &reports).map_err(fail(st))?;
        write_json(&out_dir.join(RUN_REPORT), &self.config).map_err(fail(st))?;
        Ok(StageSummary {
            stage: st,
            input: drafts.len(),
            output: reports.first().map(|r| r.examples).unwrap_or(0),
            artifact: out_dir.clone(),
        })
    }

    /// Scores the eval target on every configured benchmark and writes
    /// `eval_<name>.json` and `eval_<name>.csv` to the output directory.
    pub fn eval(&self) -> Result<Vec<EvalResult>, PipelineError> {
        let mut out = Vec::new();
        let failure = |msg: String| PipelineError::StageFailure {
            stage: Stage::Emit,
            msg: format!("eval: {msg}"),
        };
        if self.config.eval.benchmarks.is_empty() {
            return Err(ConfigError::Invalid {
                field: "eval.benchmarks".into(),
                msg: "no benchmarks configured".into(),
            }
            .into());
        }
        for b in &self.config.eval.benchmarks {
            let items = load_multichoice(&b.path, &b.fields).map_err(|e| failure(e.to_string()))?;
            let gw = build_gateway(&self.config.eval_target, &items, self.config.seed).map_err(failure)?;
            let result = evaluate(
                &b.name,
                &items,
                &self.config.eval.config,
                &gw,
                &self.prompts,
                &self.config.emit.tokens,
            )
            .map_err(|e| failure(e.to_string()))?;
            let dir = &self.config.paths.outputs;
            write_json(&dir.join(format!("eval_{}.json", b.name)), &result).map_err(failure)?;
            write_predictions_csv(&dir.join(format!("eval_{}.csv", b.name)), &result).map_err(|e| failure(e.to_string()))?;
            out.push(result);
        }
        Ok(out)
    }
}

fn pinpoint_error_kind(e: &PinpointError) -> &'static str {
    match e {
        PinpointError::WrongSource(_) => "wrong_source",
        PinpointError::NoDecisionFound => "no_decision_found",
        PinpointError::NoEntitiesFound(_) => "no_entities_found",
        PinpointError::EntityNotInSentence { .. } => "entity_not_in_sentence",
        PinpointError::InvalidParams(_) => "invalid_params",
        PinpointError::Gateway(_) => "gateway",
        PinpointError::Prompt(_) => "prompt",
        PinpointError::Trajectory(_) => "trajectory",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_resume_skips_checkpointed_items() {
        let dir = tempfile::tempdir().unwrap();
        let partial = dir.path().join("x.partial.jsonl");
        let items: Vec<u32> = (0..10).collect();
        let calls = std::sync::atomic::AtomicUsize::new(0);
        // first run dies on item 7; chunks of 3 before it are checkpointed
        let err = run_chunked(&partial, &items, |i| i.to_string(), 3, false, |&i| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if i == 7 {
                Err("boom".into())
            } else {
                Ok(i * 2)
            }
        });
        assert!(err.is_err());
        assert!(partial.exists());
        calls.store(0, std::sync::atomic::Ordering::SeqCst);
        let out = run_chunked(&partial, &items, |i| i.to_string(), 3, true, |&i| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(i * 2)
        })
        .unwrap();
        assert_eq!(out, (0..10).map(|i| i * 2).collect::<Vec<_>>());
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 4);
        assert!(!partial.exists());
    }

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>(), Ok(s));
        }
    }
}
