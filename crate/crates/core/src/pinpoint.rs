//! Reflection pinpoints: the located error sites that reflections target.
//!
//! Two pathways produce them:
//!
//! * sentence level (multichoice): sample full answers repeatedly and take the
//!   sentence describing a wrong option from the first incorrect sample;
//! * word level (consultations): mask typed medical entities, probe the model
//!   to fill them, and keep entities it gets wrong often enough.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QARecord, Source};
use crate::decision::extract_decision;
use crate::gateway::{
    ChatRequest, Gateway, GatewayError, GenerationParams, SAMPLING_TEMPERATURE, STABLE_TEMPERATURE,
};
use crate::prompts::{self, PromptCatalog, PromptError};
use crate::text::{normalize_for_match, normalize_ws, replace_first, split_sentences};
use crate::trajectory::{Trajectory, TrajectoryError};

pub const TASK_RG1_SAMPLE: &str = "rg1.sample";
pub const TASK_RG2_EXTRACT: &str = "rg2.extract";
pub const TASK_RG2_FILL: &str = "rg2.fill";
pub const TASK_JUDGE: &str = "judge.equivalence";

#[derive(Debug, Error)]
pub enum PinpointError {
    #[error("record {0} has the wrong source for this pathway")]
    WrongSource(String),
    #[error("no decision found in sample")]
    NoDecisionFound,
    #[error("no usable entities in record {0}")]
    NoEntitiesFound(String),
    #[error("entity {surface:?} does not occur in sentence")]
    EntityNotInSentence { surface: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pathway {
    #[serde(rename = "RG1")]
    Rg1,
    #[serde(rename = "RG2")]
    Rg2,
}

impl Pathway {
    pub fn as_str(self) -> &'static str {
        match self {
            Pathway::Rg1 => "RG1",
            Pathway::Rg2 => "RG2",
        }
    }
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Disease,
    Etiology,
    Treatment,
    Drug,
    Anatomy,
    Test,
    Other,
}

impl EntityType {
    pub const ALL: [EntityType; 7] = [
        EntityType::Disease,
        EntityType::Etiology,
        EntityType::Treatment,
        EntityType::Drug,
        EntityType::Anatomy,
        EntityType::Test,
        EntityType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Disease => "disease",
            EntityType::Etiology => "etiology",
            EntityType::Treatment => "treatment",
            EntityType::Drug => "drug",
            EntityType::Anatomy => "anatomy",
            EntityType::Test => "test",
            EntityType::Other => "other",
        }
    }

    /// Bracketed uppercase placeholder, e.g. `[DRUG]`.
    pub fn placeholder(self) -> String {
        format!("[{}]", self.as_str().to_uppercase())
    }

    /// Lenient parse of model-provided type names; unknown names map to `Other`.
    pub fn parse_loose(s: &str) -> Self {
        let s = s.trim().to_lowercase();
        match s.as_str() {
            "disease" | "diagnosis" | "condition" | "disorder" | "symptom" => EntityType::Disease,
            "etiology" | "aetiology" | "cause" | "pathogen" => EntityType::Etiology,
            "treatment" | "therapy" | "procedure" | "intervention" => EntityType::Treatment,
            "drug" | "medication" | "medicine" | "chemical" => EntityType::Drug,
            "anatomy" | "body part" | "organ" | "body_part" => EntityType::Anatomy,
            "test" | "investigation" | "lab" | "exam" | "examination" | "imaging" => EntityType::Test,
            _ => EntityType::Other,
        }
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown entity type {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEntity {
    pub surface: String,
    pub entity_type: EntityType,
    pub wrong_fill: String,
    pub error_rate: f64,
    pub masked_sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PinpointDetail {
    Sentence { sampled_answer: String, wrong_option: char },
    Entity(MaskedEntity),
}

/// One model call made while mining a pinpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub ordinal: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Extracted decision letter or cleaned entity fill.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extracted: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinpoint {
    pub id: String,
    pub record_id: String,
    pub pathway: Pathway,
    pub step_index: usize,
    pub erroneous_text: String,
    pub detail: PinpointDetail,
    pub transcript: Vec<Probe>,
}

impl Pinpoint {
    pub fn masked_entity(&self) -> Option<&MaskedEntity> {
        match &self.detail {
            PinpointDetail::Entity(e) => Some(e),
            PinpointDetail::Sentence { .. } => None,
        }
    }

    pub fn wrong_option(&self) -> Option<char> {
        match &self.detail {
            PinpointDetail::Sentence { wrong_option, .. } => Some(*wrong_option),
            PinpointDetail::Entity(_) => None,
        }
    }

    pub fn error_rate(&self) -> Option<f64> {
        self.masked_entity().map(|e| e.error_rate)
    }
}

/// A pinpoint with the erroneous trajectory it was found in. This is the
/// unit persisted between the pinpoint and reflect stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinpointArtifact {
    pub pinpoint: Pinpoint,
    pub erroneous: Trajectory,
}

/// Replaces the first occurrence of `surface` with the type placeholder.
pub fn mask_entity(sentence: &str, surface: &str, entity_type: EntityType) -> Result<String, PinpointError> {
    if surface.is_empty() {
        return Err(PinpointError::EntityNotInSentence {
            surface: surface.to_string(),
        });
    }
    replace_first(sentence, surface, &entity_type.placeholder()).ok_or_else(|| PinpointError::EntityNotInSentence {
        surface: surface.to_string(),
    })
}

/// Inverse of [`mask_entity`]: puts `fill` where the placeholder is.
pub fn unmask(masked: &str, entity_type: EntityType, fill: &str) -> Option<String> {
    replace_first(masked, &entity_type.placeholder(), fill)
}

/// Consultation reference trajectory: every sentence but the last is a step,
/// the last sentence is the answer.
pub fn consultation_trajectory(record: &QARecord) -> Option<Trajectory> {
    sentences_to_trajectory(&record.id, &split_sentences(&record.reasoning))
}

fn sentences_to_trajectory(id: &str, sentences: &[String]) -> Option<Trajectory> {
    if sentences.len() < 2 {
        return None;
    }
    let (steps, answer) = sentences.split_at(sentences.len() - 1);
    Trajectory::new(id, steps, &answer[0]).ok()
}

fn mentions_option(sentence: &str, letter: char, text: &str) -> bool {
    let l = regex::escape(&letter.to_string());
    let re = Regex::new(&format!(
        r"(?i:\b(?:option|choice|answer)\s+)\(?{l}\)?(?:\b|$)|\({l}\)|^{l}[.):]\s"
    ))
    .expect("static pattern");
    if re.is_match(sentence) {
        return true;
    }
    let t = text.trim();
    t.chars().count() >= 3 && sentence.to_lowercase().contains(&t.to_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rg1Selection {
    /// Stop at the first incorrect sample.
    First,
    /// One pinpoint per incorrect sample.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rg1Params {
    pub samples: usize,
    pub selection: Rg1Selection,
    pub temperature: f32,
}

impl Default for Rg1Params {
    fn default() -> Self {
        Self {
            samples: 8,
            selection: Rg1Selection::First,
            temperature: SAMPLING_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Correct,
    Incorrect,
    NoDecision,
    NoWrongOptionSentence,
    GatewayError,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rg1Outcome {
    pub record_id: String,
    pub found: Vec<(Trajectory, Pinpoint)>,
    pub samples: Vec<(Probe, Option<SampleStatus>)>,
    pub unparsed: usize,
}

/// Sentence-level pinpoint mining for one multichoice record.
///
/// All `samples` answers are requested as one batch and scanned in ordinal
/// order. Unparseable samples are skipped and counted. A gateway error is
/// returned only when every sample call failed.
pub fn rg1_generate_pinpoint(
    record: &QARecord,
    params: &Rg1Params,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Result<Rg1Outcome, PinpointError> {
    if record.source != Source::Multichoice {
        return Err(PinpointError::WrongSource(record.id.clone()));
    }
    if params.samples < 1 {
        return Err(PinpointError::InvalidParams("sample count must be >= 1".into()));
    }
    let letters = record.option_letters();
    let gold = record
        .gold_letter()
        .ok_or_else(|| PinpointError::WrongSource(record.id.clone()))?;
    let options = record.options.clone().unwrap_or_default();
    let user = prompts.render(
        prompts::RG1_SAMPLE,
        &[("question", &record.question), ("options", &record.options_block())],
    )?;
    let reqs: Vec<ChatRequest> = (0..params.samples)
        .map(|k| {
            ChatRequest::prompt(
                format!("{TASK_RG1_SAMPLE}|{}|{k}", record.id),
                Some(prompts.system()),
                user.clone(),
                GenerationParams::with_temperature(params.temperature),
            )
        })
        .collect();
    let replies = gateway.complete_many(&reqs);

    let mut out = Rg1Outcome {
        record_id: record.id.clone(),
        ..Default::default()
    };
    let mut first_error = None;
    let mut failures = 0;
    for (k, reply) in replies.into_iter().enumerate() {
        let mut probe = Probe {
            ordinal: k,
            response: None,
            extracted: None,
            correct: None,
            error: None,
        };
        let stop = params.selection == Rg1Selection::First && !out.found.is_empty();
        let status = match reply {
            Err(e) => {
                probe.error = Some(e.to_string());
                failures += 1;
                first_error.get_or_insert(e);
                Some(SampleStatus::GatewayError)
            }
            Ok(resp) => {
                let text = resp.content;
                probe.response = Some(text.clone());
                match extract_decision(&text, &letters) {
                    Err(_) => {
                        out.unparsed += 1;
                        Some(SampleStatus::NoDecision)
                    }
                    Ok(d) => {
                        probe.extracted = Some(d.to_string());
                        probe.correct = Some(d == gold);
                        if d == gold {
                            Some(SampleStatus::Correct)
                        } else if stop {
                            Some(SampleStatus::Incorrect)
                        } else {
                            let wrong_text = options.get(&d).map(String::as_str).unwrap_or("");
                            match locate_wrong_option(&record.id, &text, d, wrong_text) {
                                Some((traj, idx)) => {
                                    let erroneous_text = traj.steps[idx].text.clone();
                                    let pinpoint = Pinpoint {
                                        id: format!("{}#rg1-{k}", record.id),
                                        record_id: record.id.clone(),
                                        pathway: Pathway::Rg1,
                                        step_index: idx,
                                        erroneous_text,
                                        detail: PinpointDetail::Sentence {
                                            sampled_answer: text.clone(),
                                            wrong_option: d,
                                        },
                                        transcript: Vec::new(),
                                    };
                                    out.found.push((traj, pinpoint));
                                    Some(SampleStatus::Incorrect)
                                }
                                None => Some(SampleStatus::NoWrongOptionSentence),
                            }
                        }
                    }
                }
            }
        };
        out.samples.push((probe, status));
    }
    if failures == params.samples {
        return Err(first_error.expect("at least one failure").into());
    }
    let transcript: Vec<Probe> = out.samples.iter().map(|(p, _)| p.clone()).collect();
    for (_, p) in out.found.iter_mut() {
        p.transcript = transcript.clone();
    }
    Ok(out)
}

/// Splits a sampled answer into steps and answer and finds the last step
/// describing the wrong option. Returns the erroneous trajectory and the
/// pinpoint step index.
fn locate_wrong_option(record_id: &str, text: &str, wrong: char, wrong_text: &str) -> Option<(Trajectory, usize)> {
    let sentences = split_sentences(text);
    let traj = sentences_to_trajectory(record_id, &sentences)?;
    let idx = traj
        .steps
        .iter()
        .rposition(|s| mentions_option(&s.text, wrong, wrong_text))?;
    let erroneous = traj.steps[idx].text.clone();
    traj.with_error(idx, &erroneous).ok().map(|t| (t, idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rg2Params {
    pub probes: usize,
    pub error_threshold: f64,
    pub max_pinpoints: usize,
    /// Upper bound on entities probed per record.
    pub max_entities: usize,
    /// Include the patient question as context in fill prompts.
    pub include_question: bool,
    pub fill_temperature: f32,
    pub judge_temperature: f32,
}

impl Default for Rg2Params {
    fn default() -> Self {
        Self {
            probes: 10,
            error_threshold: 0.5,
            max_pinpoints: 3,
            max_entities: 8,
            include_question: true,
            fill_temperature: SAMPLING_TEMPERATURE,
            judge_temperature: STABLE_TEMPERATURE,
        }
    }
}

impl Rg2Params {
    pub fn validate(&self) -> Result<(), PinpointError> {
        if self.probes < 1 {
            return Err(PinpointError::InvalidParams("probe count must be >= 1".into()));
        }
        if !(self.error_threshold > 0.0 && self.error_threshold <= 1.0) {
            return Err(PinpointError::InvalidParams("error_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// An entity located in a reference step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatedEntity {
    pub surface: String,
    pub entity_type: EntityType,
    pub step_index: usize,
    pub offset: usize,
}

/// Parses the extraction reply: a JSON array of `{"entity", "type"}` objects,
/// possibly wrapped in prose or a code fence.
pub fn parse_entities(text: &str) -> Vec<(String, EntityType)> {
    let (Some(start), Some(end)) = (text.find('['), text.rfind(']')) else {
        return Vec::new();
    };
    if end <= start {
        return Vec::new();
    }
    let Ok(serde_json::Value::Array(items)) = serde_json::from_str::<serde_json::Value>(&text[start..=end]) else {
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|item| {
            let surface = ["entity", "text", "name"]
                .iter()
                .find_map(|k| item.get(*k).and_then(|v| v.as_str()))?;
            let ty = item.get("type").and_then(|v| v.as_str()).unwrap_or("other");
            let surface = surface.trim();
            (!surface.is_empty()).then(|| (surface.to_string(), EntityType::parse_loose(ty)))
        })
        .collect()
}

/// Finds each extracted entity in the reference steps (exact match first,
/// then case-insensitive), dropping duplicates and entities not found.
pub fn locate_entities(steps: &[String], entities: &[(String, EntityType)], limit: usize) -> Vec<LocatedEntity> {
    let mut out: Vec<LocatedEntity> = Vec::new();
    for (surface, ty) in entities {
        if out.len() >= limit {
            break;
        }
        if surface.contains('[') || surface.contains(']') {
            continue;
        }
        let exact = steps
            .iter()
            .enumerate()
            .find_map(|(i, s)| s.find(surface.as_str()).map(|at| (i, at, surface.clone())));
        let found = exact.or_else(|| {
            let needle = surface.to_lowercase();
            steps.iter().enumerate().find_map(|(i, s)| {
                let lower = s.to_lowercase();
                // only accept when lowercasing preserved byte offsets
                if lower.len() != s.len() {
                    return None;
                }
                lower
                    .find(&needle)
                    .map(|at| (i, at, s[at..at + needle.len()].to_string()))
            })
        });
        let Some((step_index, offset, surface)) = found else {
            continue;
        };
        // the first occurrence in the sentence is what gets masked
        let offset = steps[step_index].find(surface.as_str()).unwrap_or(offset);
        let key = normalize_for_match(&surface);
        if out
            .iter()
            .any(|e| e.step_index == step_index && normalize_for_match(&e.surface) == key)
        {
            continue;
        }
        out.push(LocatedEntity {
            surface,
            entity_type: *ty,
            step_index,
            offset,
        });
    }
    out
}

/// Cleans a fill reply down to the bare term.
pub fn clean_fill(text: &str) -> String {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let mut line = line;
    for label in ["Answer:", "answer:", "Term:", "term:", "Missing term:"] {
        if let Some(rest) = line.strip_prefix(label) {
            line = rest.trim();
        }
    }
    normalize_ws(line.trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '.' | ',' | ';' | ':')))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityProbeSummary {
    pub entity: LocatedEntity,
    pub answered: usize,
    pub wrong: usize,
    pub error_rate: Option<f64>,
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rg2Outcome {
    pub record_id: String,
    /// At most `max_pinpoints`, sorted by error rate (descending).
    pub found: Vec<(Trajectory, Pinpoint)>,
    pub entities: Vec<EntityProbeSummary>,
}

/// Word-level pinpoint mining for one consultation record.
pub fn rg2_generate_pinpoints(
    record: &QARecord,
    params: &Rg2Params,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Result<Rg2Outcome, PinpointError> {
    if record.source != Source::Consultation {
        return Err(PinpointError::WrongSource(record.id.clone()));
    }
    params.validate()?;
    let Some(reference) = consultation_trajectory(record) else {
        return Err(PinpointError::NoEntitiesFound(record.id.clone()));
    };
    let steps: Vec<String> = reference.steps.iter().map(|s| s.text.clone()).collect();

    let extract_prompt = prompts.render(prompts::RG2_EXTRACT, &[("response", &record.reasoning)])?;
    let extraction = gateway.complete(&ChatRequest::prompt(
        format!("{TASK_RG2_EXTRACT}|{}", record.id),
        Some(prompts.system()),
        extract_prompt,
        GenerationParams::with_temperature(params.judge_temperature),
    ))?;
    let entities = locate_entities(&steps, &parse_entities(&extraction.content), params.max_entities);
    if entities.is_empty() {
        return Err(PinpointError::NoEntitiesFound(record.id.clone()));
    }

    let question_context = if params.include_question {
        format!("Patient question: {}\n\n", record.question)
    } else {
        String::new()
    };
    let mut masked = Vec::with_capacity(entities.len());
    let mut reqs = Vec::with_capacity(entities.len() * params.probes);
    for (e_idx, e) in entities.iter().enumerate() {
        let m = mask_entity(&steps[e.step_index], &e.surface, e.entity_type)?;
        let user = prompts.render(
            prompts::RG2_FILL,
            &[
                ("question_context", &question_context),
                ("placeholder", &e.entity_type.placeholder()),
                ("entity_type", e.entity_type.as_str()),
                ("masked_sentence", &m),
            ],
        )?;
        for trial in 0..params.probes {
            reqs.push(ChatRequest::prompt(
                format!("{TASK_RG2_FILL}|{}|{e_idx}|{trial}", record.id),
                Some(prompts.system()),
                user.clone(),
                GenerationParams::with_temperature(params.fill_temperature),
            ));
        }
        masked.push(m);
    }
    let replies = gateway.complete_many(&reqs);

    // verdicts per (entity, normalized fill); exact matches need no judge
    let mut fills: Vec<Vec<Probe>> = vec![Vec::new(); entities.len()];
    let mut pending: BTreeMap<(usize, String), String> = BTreeMap::new();
    for (i, reply) in replies.into_iter().enumerate() {
        let (e_idx, trial) = (i / params.probes, i % params.probes);
        let e = &entities[e_idx];
        let mut probe = Probe {
            ordinal: trial,
            response: None,
            extracted: None,
            correct: None,
            error: None,
        };
        match reply {
            Err(err) => probe.error = Some(err.to_string()),
            Ok(resp) => {
                let fill = clean_fill(&resp.content);
                probe.response = Some(resp.content);
                if !fill.is_empty() {
                    let key = normalize_for_match(&fill);
                    if key == normalize_for_match(&e.surface) {
                        probe.correct = Some(true);
                    } else {
                        pending.entry((e_idx, key)).or_insert_with(|| fill.clone());
                    }
                    probe.extracted = Some(fill);
                }
            }
        }
        fills[e_idx].push(probe);
    }

    let judge_keys: Vec<(usize, String)> = pending.keys().cloned().collect();
    let judge_reqs: Vec<ChatRequest> = judge_keys
        .iter()
        .enumerate()
        .map(|(n, (e_idx, key))| {
            let e = &entities[*e_idx];
            let user = prompts.render(
                prompts::JUDGE_EQUIVALENCE,
                &[
                    ("entity_type", e.entity_type.as_str()),
                    ("expected", &e.surface),
                    ("candidate", &pending[&(*e_idx, key.clone())]),
                    ("sentence", &steps[e.step_index]),
                ],
            )?;
            Ok(ChatRequest::prompt(
                format!("{TASK_JUDGE}|{}|{e_idx}|{n}", record.id),
                Some(prompts.system()),
                user,
                GenerationParams::with_temperature(params.judge_temperature),
            ))
        })
        .collect::<Result<_, PromptError>>()?;
    let verdicts: BTreeMap<(usize, String), Option<bool>> = judge_keys
        .into_iter()
        .zip(gateway.complete_many(&judge_reqs))
        .map(|(k, r)| (k, r.ok().and_then(|r| crate::corpus::parse_yes_no(&r.content))))
        .collect();

    let mut summaries = Vec::with_capacity(entities.len());
    let mut candidates = Vec::new();
    for (e_idx, (e, mut probes)) in entities.iter().zip(fills).enumerate() {
        let mut wrong_counts: Vec<(String, String, usize)> = Vec::new(); // (key, text, count)
        let (mut answered, mut wrong) = (0, 0);
        for p in probes.iter_mut() {
            if p.correct.is_none() {
                if let Some(fill) = &p.extracted {
                    let key = normalize_for_match(fill);
                    // a judge that fails to answer leaves the probe unscored
                    p.correct = verdicts.get(&(e_idx, key)).copied().flatten();
                }
            }
            match p.correct {
                Some(true) => answered += 1,
                Some(false) => {
                    answered += 1;
                    wrong += 1;
                    let fill = p.extracted.clone().unwrap_or_default();
                    let key = normalize_for_match(&fill);
                    match wrong_counts.iter_mut().find(|(k, _, _)| *k == key) {
                        Some(entry) => entry.2 += 1,
                        None => wrong_counts.push((key, fill, 1)),
                    }
                }
                None => {}
            }
        }
        let error_rate = (answered > 0).then(|| wrong as f64 / answered as f64);
        if let Some(rate) = error_rate {
            if wrong > 0 && rate >= params.error_threshold {
                // most frequent wrong fill; ties keep the earliest
                let best = wrong_counts
                    .iter()
                    .enumerate()
                    .max_by(|(ia, a), (ib, b)| a.2.cmp(&b.2).then(ib.cmp(ia)))
                    .map(|(_, w)| w.1.clone())
                    .expect("wrong > 0");
                candidates.push((e_idx, rate, best));
            }
        }
        summaries.push(EntityProbeSummary {
            entity: e.clone(),
            answered,
            wrong,
            error_rate,
            probes,
        });
    }

    candidates.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(entities[a.0].step_index.cmp(&entities[b.0].step_index))
            .then(entities[a.0].offset.cmp(&entities[b.0].offset))
    });
    candidates.truncate(params.max_pinpoints);

    let mut found = Vec::with_capacity(candidates.len());
    for (rank, (e_idx, rate, wrong_fill)) in candidates.into_iter().enumerate() {
        let e = &entities[e_idx];
        let erroneous_text = unmask(&masked[e_idx], e.entity_type, &wrong_fill).expect("placeholder present");
        let erroneous = reference.with_error(e.step_index, &erroneous_text)?;
        let pinpoint = Pinpoint {
            id: format!("{}#rg2-{rank}", record.id),
            record_id: record.id.clone(),
            pathway: Pathway::Rg2,
            step_index: e.step_index,
            erroneous_text: erroneous.steps[e.step_index].text.clone(),
            detail: PinpointDetail::Entity(MaskedEntity {
                surface: e.surface.clone(),
                entity_type: e.entity_type,
                wrong_fill,
                error_rate: rate,
                masked_sentence: masked[e_idx].clone(),
            }),
            transcript: summaries[e_idx].probes.clone(),
        };
        found.push((erroneous, pinpoint));
    }
    Ok(Rg2Outcome {
        record_id: record.id.clone(),
        found,
        entities: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnBackend, RetryPolicy};
    use std::sync::Arc;

    fn mc_record() -> QARecord {
        QARecord {
            id: "mc-1".into(),
            source: Source::Multichoice,
            question: "Which drug irreversibly inhibits cyclooxygenase?".into(),
            options: Some(
                [('A', "Ibuprofen"), ('B', "Aspirin"), ('C', "Celecoxib"), ('D', "Naproxen")]
                    .into_iter()
                    .map(|(k, v)| (k, v.to_string()))
                    .collect(),
            ),
            gold: "C".into(),
            reasoning: String::new(),
        }
    }

    fn gw(backend: impl crate::gateway::Backend + 'static) -> Gateway {
        Gateway::new(Arc::new(backend), 4, RetryPolicy { max_attempts: 1, base_backoff_ms: 0 })
    }

    #[test]
    fn mask_first_occurrence() {
        assert_eq!(
            mask_entity("take amoxicillin twice daily", "amoxicillin", EntityType::Drug).unwrap(),
            "take [DRUG] twice daily"
        );
        assert_eq!(
            mask_entity("rest, rest and more rest", "rest", EntityType::Treatment).unwrap(),
            "[TREATMENT], rest and more rest"
        );
        assert!(matches!(
            mask_entity("take it", "amoxicillin", EntityType::Drug),
            Err(PinpointError::EntityNotInSentence { .. })
        ));
    }

    #[test]
    fn rg1_tag_keyed_scenario() {
        let backend = FnBackend::new(|r: &ChatRequest| {
            let k: usize = r.tag.rsplit('|').next().unwrap().parse().unwrap();
            Ok(crate::gateway::ChatResponse::stop(match k {
                0 => "Celecoxib is selective. Therefore, the answer is (C).",
                1 => "No idea here.",
                2 => "Cyclooxygenase has two isoforms. Option B, aspirin, directly inhibits the enzyme. Therefore, the answer is (B).",
                _ => "Aspirin is wrong. Option A, ibuprofen, is reversible. Therefore, the answer is (A).",
            }))
        });
        let params = Rg1Params {
            samples: 4,
            ..Default::default()
        };
        let out = rg1_generate_pinpoint(&mc_record(), &params, &gw(backend), &PromptCatalog::default()).unwrap();
        assert_eq!(out.unparsed, 1);
        assert_eq!(out.found.len(), 1);
        assert_eq!(out.found[0].1.wrong_option(), Some('B'));
        assert_eq!(out.found[0].1.step_index, 1);
        assert_eq!(out.samples.len(), 4);

        let all = Rg1Params {
            samples: 4,
            selection: Rg1Selection::All,
            ..Default::default()
        };
        let backend = FnBackend::new(|r: &ChatRequest| {
            let k: usize = r.tag.rsplit('|').next().unwrap().parse().unwrap();
            Ok(crate::gateway::ChatResponse::stop(if k.is_multiple_of(2) {
                "Intro sentence. Option B, aspirin, directly inhibits the enzyme. Therefore, the answer is (B)."
            } else {
                "Intro sentence. Option A, ibuprofen, is the one. Therefore, the answer is (A)."
            }))
        });
        let out = rg1_generate_pinpoint(&mc_record(), &all, &gw(backend), &PromptCatalog::default()).unwrap();
        assert_eq!(out.found.len(), 4);
        assert!(out.found.iter().all(|(_, p)| p.wrong_option() != Some('C')));
    }

    #[test]
    fn rg1_all_correct_is_absent() {
        let backend = FnBackend::new(|_| Ok(crate::gateway::ChatResponse::stop("Reasoning. Therefore, the answer is (C).")));
        let out = rg1_generate_pinpoint(&mc_record(), &Rg1Params::default(), &gw(backend), &PromptCatalog::default()).unwrap();
        assert!(out.found.is_empty());
        assert_eq!(out.samples.len(), 8);
    }

    #[test]
    fn rg1_all_failed_propagates() {
        let backend = FnBackend::new(|_| Err(GatewayError::Timeout { attempts: 1 }));
        assert!(matches!(
            rg1_generate_pinpoint(&mc_record(), &Rg1Params::default(), &gw(backend), &PromptCatalog::default()),
            Err(PinpointError::Gateway(GatewayError::Timeout { .. }))
        ));
    }

    fn consult() -> QARecord {
        let reasoning = "Your ear pain and fever suggest otitis media. I recommend amoxicillin for seven days. \
                         Paracetamol can ease the pain. See a doctor if it persists.";
        QARecord {
            id: "c-1".into(),
            source: Source::Consultation,
            question: "My ear hurts and I have a fever, what should I do?".into(),
            options: None,
            gold: reasoning.into(),
            reasoning: reasoning.into(),
        }
    }

    /// Fill mock: amoxicillin filled wrong (ibuprofen) on trials 0..7, otitis
    /// media always right, paracetamol wrong on 4 of 10.
    fn rg2_backend() -> impl crate::gateway::Backend {
        FnBackend::new(|r: &ChatRequest| {
            let parts: Vec<&str> = r.tag.split('|').collect();
            let reply = match parts[0] {
                TASK_RG2_EXTRACT => r#"Here: [{"entity":"otitis media","type":"disease"},{"entity":"amoxicillin","type":"drug"},{"entity":"Paracetamol","type":"drug"},{"entity":"unicorn","type":"drug"}]"#.to_string(),
                TASK_RG2_FILL => {
                    let e: usize = parts[2].parse().unwrap();
                    let t: usize = parts[3].parse().unwrap();
                    match e {
                        0 => "Otitis media.".into(),
                        1 if t < 7 => "ibuprofen".into(),
                        1 => "Amoxicillin".into(),
                        _ if t < 4 => "aspirin".into(),
                        _ => "paracetamol".into(),
                    }
                }
                TASK_JUDGE => "no".into(),
                other => panic!("unexpected task {other}"),
            };
            Ok(crate::gateway::ChatResponse::stop(reply))
        })
    }

    #[test]
    fn rg2_scripted_probe() {
        let out = rg2_generate_pinpoints(&consult(), &Rg2Params::default(), &gw(rg2_backend()), &PromptCatalog::default()).unwrap();
        assert_eq!(out.entities.len(), 3);
        assert_eq!(out.found.len(), 1);
        let (traj, p) = &out.found[0];
        let e = p.masked_entity().unwrap();
        assert_eq!(e.surface, "amoxicillin");
        assert_eq!(e.wrong_fill, "ibuprofen");
        assert!((e.error_rate - 0.7).abs() < 1e-12);
        assert_eq!(p.erroneous_text, "I recommend ibuprofen for seven days.");
        assert_eq!(traj.steps[1].text, "I recommend ibuprofen for seven days.");
        assert!(traj.is_erroneous());
        // all-correct entity never becomes a pinpoint
        assert_eq!(out.entities[0].error_rate, Some(0.0));

        let lower = Rg2Params {
            error_threshold: 0.3,
            ..Default::default()
        };
        let out = rg2_generate_pinpoints(&consult(), &lower, &gw(rg2_backend()), &PromptCatalog::default()).unwrap();
        let rates: Vec<f64> = out.found.iter().map(|(_, p)| p.error_rate().unwrap()).collect();
        assert_eq!(rates.len(), 2);
        assert!(rates[0] >= rates[1]);
    }

    #[test]
    fn rg2_no_entities() {
        let backend = FnBackend::new(|_| Ok(crate::gateway::ChatResponse::stop("[]")));
        assert!(matches!(
            rg2_generate_pinpoints(&consult(), &Rg2Params::default(), &gw(backend), &PromptCatalog::default()),
            Err(PinpointError::NoEntitiesFound(_))
        ));
    }

    #[test]
    fn entity_parsing_and_location() {
        let parsed = parse_entities("```json\n[{\"entity\": \"Amoxicillin\", \"type\": \"Medication\"}, {\"text\": \"ear\"}]\n```");
        assert_eq!(
            parsed,
            vec![("Amoxicillin".to_string(), EntityType::Drug), ("ear".to_string(), EntityType::Other)]
        );
        let steps = vec!["Take amoxicillin now.".to_string(), "The ear is sore.".to_string()];
        let loc = locate_entities(&steps, &parsed, 8);
        assert_eq!(loc[0].surface, "amoxicillin");
        assert_eq!(loc[0].step_index, 0);
        assert_eq!(loc[1].step_index, 1);
        assert_eq!(loc[1].offset, 4);
        assert!(parse_entities("no json").is_empty());
    }

    #[test]
    fn fill_cleaning() {
        assert_eq!(clean_fill("\"Amoxicillin.\"\nextra"), "Amoxicillin");
        assert_eq!(clean_fill("Answer: high blood pressure"), "high blood pressure");
    }
}
