//! Reflection drafting: reflection question, closed-book reflection answer,
//! and the corrected step for one pinpoint.
//!
//! The answer prompt carries only the reflection question. Any draft whose
//! question or answer repeats [`LEAK_MIN_CHARS`] or more characters of the
//! original question is rejected.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QARecord, Source};
use crate::decision::extract_decision;
use crate::gateway::{ChatRequest, Gateway, GatewayError, GenerationParams, STABLE_TEMPERATURE};
use crate::par;
use crate::pinpoint::{clean_fill, unmask, Pathway, Pinpoint, PinpointArtifact};
use crate::prompts::{self, PromptCatalog, PromptError};
use crate::text::{find_verbatim_overlap, normalize_for_match, normalize_ws, LEAK_MIN_CHARS};
use crate::trajectory::{assemble_reflective, ReflectionPair, ReflectiveTrajectory, Trajectory, TrajectoryError};

pub const TASK_REFLECT_QUESTION: &str = "reflect.question";
pub const TASK_REFLECT_ANSWER: &str = "reflect.answer";
pub const TASK_MODIFY: &str = "reflect.modify";

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error("pinpoint {pinpoint}: record {record} does not match")]
    RecordMismatch { pinpoint: String, record: String },
    #[error("pinpoint {pinpoint}: reflection question rejected ({reason})")]
    QuestionRejected { pinpoint: String, reason: String },
    #[error("pinpoint {pinpoint}: reflection answer is empty")]
    EmptyAnswer { pinpoint: String },
    #[error("pinpoint {pinpoint}: {stage} repeats question text {overlap:?}")]
    LeakageDetected {
        pinpoint: String,
        stage: &'static str,
        overlap: String,
    },
    #[error("pinpoint {pinpoint}: malformed modification ({reason})")]
    MalformedModification { pinpoint: String, reason: String },
    #[error("pinpoint {pinpoint}: modification left the error in place")]
    NoChangeProduced { pinpoint: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

impl ReflectionError {
    /// Short stable label used in stage reports.
    pub fn kind(&self) -> &'static str {
        match self {
            ReflectionError::RecordMismatch { .. } => "record_mismatch",
            ReflectionError::QuestionRejected { .. } => "question_rejected",
            ReflectionError::EmptyAnswer { .. } => "empty_answer",
            ReflectionError::LeakageDetected { .. } => "leakage_detected",
            ReflectionError::MalformedModification { .. } => "malformed_modification",
            ReflectionError::NoChangeProduced { .. } => "no_change_produced",
            ReflectionError::Gateway(_) => "gateway",
            ReflectionError::Prompt(_) => "prompt",
            ReflectionError::Trajectory(_) => "trajectory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectParams {
    /// Extra reflection-question attempts after a rejected one.
    pub question_retries: usize,
    pub temperature: f32,
    /// Give the modification prompt the question and full response. When off
    /// it sees only the flagged step and the reflection.
    pub full_context_modify: bool,
    /// Longest accepted replacement term, in words.
    pub max_term_words: usize,
}

impl Default for ReflectParams {
    fn default() -> Self {
        Self {
            question_retries: 1,
            temperature: STABLE_TEMPERATURE,
            full_context_modify: true,
            max_term_words: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionDraft {
    pub id: String,
    pub record_id: String,
    pub source: Source,
    pub pinpoint: Pinpoint,
    pub erroneous: Trajectory,
    pub reflection: ReflectionPair,
    pub corrected: String,
    pub reflective: ReflectiveTrajectory,
    pub transcript: Vec<TranscriptEntry>,
}

impl ReflectionDraft {
    pub fn pathway(&self) -> Pathway {
        self.pinpoint.pathway
    }

    /// The transcript entries of the reflection-answer call.
    pub fn answer_transcript(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.transcript
            .iter()
            .filter(|e| e.tag.starts_with(TASK_REFLECT_ANSWER))
    }
}

fn option_reference_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i:\b(?:option|choice|answer)s?\s+)\(?[A-J]\)?(?:\b|$)|\([A-J]\)").unwrap())
}

fn strip_label(text: &str, labels: &[&str]) -> String {
    let mut t = text.trim();
    for l in labels {
        if t.len() >= l.len() && t[..l.len()].eq_ignore_ascii_case(l) {
            t = t[l.len()..].trim_start();
        }
    }
    normalize_ws(t)
}

/// Reasons a reflection question is not usable, or `None` when it is.
pub fn question_problem(record: &QARecord, q: &str) -> Option<String> {
    if q.is_empty() {
        return Some("empty".into());
    }
    if !q.ends_with('?') {
        return Some("no trailing question mark".into());
    }
    if record.options.is_some() && option_reference_re().is_match(q) {
        return Some("refers to an answer option".into());
    }
    find_verbatim_overlap(&record.question, q, LEAK_MIN_CHARS).map(|o| format!("repeats question text {o:?}"))
}

struct Session<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptCatalog,
    params: &'a ReflectParams,
    transcript: Vec<TranscriptEntry>,
}

impl Session<'_> {
    fn ask(&mut self, tag: String, user: String) -> Result<String, ReflectionError> {
        let req = ChatRequest::prompt(
            tag.clone(),
            Some(self.prompts.system()),
            user,
            GenerationParams::with_temperature(self.params.temperature),
        );
        let resp = self.gateway.complete(&req)?;
        self.transcript.push(TranscriptEntry {
            tag,
            prompt: req.prompt_text(),
            response: resp.content.clone(),
        });
        Ok(resp.content)
    }
}

/// Builds one reflection draft for a pinpoint. The three calls run in order.
pub fn build_reflection(
    record: &QARecord,
    artifact: &PinpointArtifact,
    params: &ReflectParams,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Result<ReflectionDraft, ReflectionError> {
    let p = &artifact.pinpoint;
    if p.record_id != record.id {
        return Err(ReflectionError::RecordMismatch {
            pinpoint: p.id.clone(),
            record: record.id.clone(),
        });
    }
    let mut s = Session {
        gateway,
        prompts,
        params,
        transcript: Vec::new(),
    };
    let erroneous_response = artifact.erroneous.render();

    let q_prompt = prompts.render(
        prompts::REFLECT_QUESTION,
        &[
            ("question", &record.question),
            ("erroneous_response", &erroneous_response),
            ("erroneous_step", &p.erroneous_text),
        ],
    )?;
    let mut question = None;
    let mut last_problem = String::new();
    for attempt in 0..=params.question_retries {
        let raw = s.ask(format!("{TASK_REFLECT_QUESTION}|{}|{attempt}", p.id), q_prompt.clone())?;
        let q = strip_label(&raw, &["reflection question:", "question:"]);
        match question_problem(record, &q) {
            None => {
                question = Some(q);
                break;
            }
            Some(why) => last_problem = why,
        }
    }
    let question = question.ok_or_else(|| ReflectionError::QuestionRejected {
        pinpoint: p.id.clone(),
        reason: last_problem,
    })?;

    let a_prompt = prompts.render(prompts::REFLECT_ANSWER, &[("reflection_question", &question)])?;
    let raw = s.ask(format!("{TASK_REFLECT_ANSWER}|{}", p.id), a_prompt)?;
    let answer = strip_label(&raw, &["reflection answer:", "answer:"]);
    if answer.is_empty() {
        return Err(ReflectionError::EmptyAnswer { pinpoint: p.id.clone() });
    }
    if let Some(overlap) = find_verbatim_overlap(&record.question, &answer, LEAK_MIN_CHARS) {
        return Err(ReflectionError::LeakageDetected {
            pinpoint: p.id.clone(),
            stage: "reflection answer",
            overlap,
        });
    }
    let reflection = ReflectionPair {
        question,
        answer,
        pinpoint_index: p.step_index,
    };

    let (corrected, reflective) = match p.pathway {
        Pathway::Rg1 => modify_sentence(&mut s, record, artifact, &reflection)?,
        Pathway::Rg2 => modify_term(&mut s, record, artifact, &reflection)?,
    };
    Ok(ReflectionDraft {
        id: p.id.clone(),
        record_id: record.id.clone(),
        source: record.source,
        pinpoint: p.clone(),
        erroneous: artifact.erroneous.clone(),
        reflection,
        corrected,
        reflective,
        transcript: s.transcript,
    })
}

/// Parses `N. sentence` lines in order.
pub fn parse_numbered(text: &str) -> Vec<(usize, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.)]\s+(.+?)\s*$").unwrap());
    text.lines()
        .filter_map(|l| {
            let c = re.captures(l)?;
            Some((c[1].parse().ok()?, normalize_ws(&c[2])))
        })
        .collect()
}

fn modify_sentence(
    s: &mut Session<'_>,
    record: &QARecord,
    artifact: &PinpointArtifact,
    reflection: &ReflectionPair,
) -> Result<(String, ReflectiveTrajectory), ReflectionError> {
    let p = &artifact.pinpoint;
    let t = &artifact.erroneous;
    let i = p.step_index;
    let n = t.steps.len();
    let malformed = |reason: String| ReflectionError::MalformedModification {
        pinpoint: p.id.clone(),
        reason,
    };

    let mut lines: Vec<String> = t.steps.iter().map(|st| st.text.clone()).collect();
    lines.push(t.answer.clone());
    let numbered = lines
        .iter()
        .enumerate()
        .map(|(k, l)| format!("{}. {l}", k + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let (question, options) = if s.params.full_context_modify {
        (record.question.clone(), record.options_block())
    } else {
        (String::new(), String::new())
    };
    let step_number = (i + 1).to_string();
    let user = s.prompts.render(
        prompts::MODIFY_RG1,
        &[
            ("question", &question),
            ("options", &options),
            ("numbered_response", &numbered),
            ("reflection_question", &reflection.question),
            ("reflection_answer", &reflection.answer),
            ("step_number", &step_number),
        ],
    )?;
    let raw = s.ask(format!("{TASK_MODIFY}|{}", p.id), user)?;
    let revised = parse_numbered(&raw);
    if revised.len() != n + 1 {
        return Err(malformed(format!("expected {} numbered lines, got {}", n + 1, revised.len())));
    }
    if revised.iter().enumerate().any(|(k, (num, _))| *num != k + 1) {
        return Err(malformed("lines are not numbered 1..N in order".into()));
    }
    let revised: Vec<String> = revised.into_iter().map(|(_, l)| l).collect();
    for (k, (old, new)) in lines.iter().zip(&revised).enumerate().take(n) {
        let in_window = k + 1 >= i && k <= i + 1;
        if !in_window && normalize_ws(old) != *new {
            return Err(malformed(format!("sentence {} changed outside the allowed window", k + 1)));
        }
    }
    let corrected = revised[i].clone();
    if corrected.is_empty() || normalize_ws(&t.steps[i].text) == corrected {
        return Err(ReflectionError::NoChangeProduced { pinpoint: p.id.clone() });
    }
    let letters = record.option_letters();
    let decision = extract_decision(&revised[n], &letters).map_err(|_| malformed("no decision in last line".into()))?;
    if Some(decision) == p.wrong_option() {
        return Err(ReflectionError::NoChangeProduced { pinpoint: p.id.clone() });
    }

    // prefix before the pinpoint stays as sampled; the suffix and answer are revised
    let mut steps: Vec<String> = lines[..i].to_vec();
    steps.push(t.steps[i].text.clone());
    steps.extend(revised[i + 1..n].iter().cloned());
    let base = Trajectory::new(&t.question_id, &steps, &revised[n])?;
    let reflective = assemble_reflective(&base, i, &t.steps[i].text, reflection, &corrected)?;
    Ok((corrected, reflective))
}

fn modify_term(
    s: &mut Session<'_>,
    record: &QARecord,
    artifact: &PinpointArtifact,
    reflection: &ReflectionPair,
) -> Result<(String, ReflectiveTrajectory), ReflectionError> {
    let p = &artifact.pinpoint;
    let entity = p.masked_entity().ok_or_else(|| ReflectionError::MalformedModification {
        pinpoint: p.id.clone(),
        reason: "word-level pinpoint without a masked entity".into(),
    })?;
    let (question, response) = if s.params.full_context_modify {
        (record.question.clone(), artifact.erroneous.render())
    } else {
        (String::new(), p.erroneous_text.clone())
    };
    let user = s.prompts.render(
        prompts::MODIFY_RG2,
        &[
            ("question", &question),
            ("erroneous_response", &response),
            ("erroneous_step", &p.erroneous_text),
            ("entity_type", entity.entity_type.as_str()),
            ("wrong_term", &entity.wrong_fill),
            ("reflection_question", &reflection.question),
            ("reflection_answer", &reflection.answer),
        ],
    )?;
    let raw = s.ask(format!("{TASK_MODIFY}|{}", p.id), user)?;
    let term = clean_fill(&raw);
    let words = term.split_whitespace().count();
    if words == 0 || words > s.params.max_term_words {
        return Err(ReflectionError::MalformedModification {
            pinpoint: p.id.clone(),
            reason: format!("replacement term has {words} words"),
        });
    }
    if normalize_for_match(&term) == normalize_for_match(&entity.wrong_fill) {
        return Err(ReflectionError::NoChangeProduced { pinpoint: p.id.clone() });
    }
    let corrected = unmask(&entity.masked_sentence, entity.entity_type, &term).ok_or_else(|| {
        ReflectionError::MalformedModification {
            pinpoint: p.id.clone(),
            reason: "masked sentence lost its placeholder".into(),
        }
    })?;
    let reflective = assemble_reflective(
        &artifact.erroneous,
        p.step_index,
        &p.erroneous_text,
        reflection,
        &corrected,
    )?;
    Ok((corrected, reflective))
}

/// Drafts every artifact in parallel. `lookup` maps a record id to its record.
pub fn build_reflections<'r, L>(
    artifacts: &[PinpointArtifact],
    lookup: L,
    params: &ReflectParams,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Vec<Result<ReflectionDraft, ReflectionError>>
where
    L: Fn(&str) -> Option<&'r QARecord> + Sync,
{
    par::map(artifacts, |a| match lookup(&a.pinpoint.record_id) {
        Some(r) => build_reflection(r, a, params, gateway, prompts),
        None => Err(ReflectionError::RecordMismatch {
            pinpoint: a.pinpoint.id.clone(),
            record: a.pinpoint.record_id.clone(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatResponse, FnBackend, RetryPolicy};
    use crate::pinpoint::{mask_entity, EntityType, MaskedEntity, PinpointDetail};
    use crate::trajectory::{serialize_training_text, SpecialTokens};
    use std::sync::Arc;

    fn gw(f: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Gateway {
        Gateway::new(
            Arc::new(FnBackend::new(move |r| Ok(ChatResponse::stop(f(r))))),
            4,
            RetryPolicy {
                max_attempts: 1,
                base_backoff_ms: 0,
            },
        )
    }

    fn consult() -> (QARecord, PinpointArtifact) {
        let record = QARecord {
            id: "c-1".into(),
            source: Source::Consultation,
            question: "My child has ear pain and a fever since yesterday, what should we do?".into(),
            options: None,
            gold: String::new(),
            reasoning: String::new(),
        };
        let reference = Trajectory::new(
            "c-1",
            &["Ear pain with fever suggests otitis media.", "I recommend amoxicillin for seven days."],
            "See a doctor if it persists.",
        )
        .unwrap();
        let masked = mask_entity("I recommend amoxicillin for seven days.", "amoxicillin", EntityType::Drug).unwrap();
        let erroneous = reference.with_error(1, "I recommend ibuprofen for seven days.").unwrap();
        let pinpoint = Pinpoint {
            id: "c-1#rg2-0".into(),
            record_id: "c-1".into(),
            pathway: Pathway::Rg2,
            step_index: 1,
            erroneous_text: "I recommend ibuprofen for seven days.".into(),
            detail: PinpointDetail::Entity(MaskedEntity {
                surface: "amoxicillin".into(),
                entity_type: EntityType::Drug,
                wrong_fill: "ibuprofen".into(),
                error_rate: 0.7,
                masked_sentence: masked,
            }),
            transcript: vec![],
        };
        (record, PinpointArtifact { pinpoint, erroneous })
    }

    fn happy(r: &ChatRequest) -> String {
        match r.tag.split('|').next().unwrap() {
            TASK_REFLECT_QUESTION => "Which antibiotic is first-line for acute otitis media in children?".into(),
            TASK_REFLECT_ANSWER => "Amoxicillin is the first-line antibiotic.".into(),
            TASK_MODIFY => "amoxicillin".into(),
            t => panic!("{t}"),
        }
    }

    #[test]
    fn rg2_draft_and_closed_book_prompt() {
        let (record, art) = consult();
        let d = build_reflection(&record, &art, &ReflectParams::default(), &gw(happy), &PromptCatalog::default()).unwrap();
        assert_eq!(d.corrected, "I recommend amoxicillin for seven days.");
        assert_eq!(d.reflective.reflection_count(), 1);
        let answer_calls: Vec<_> = d.answer_transcript().collect();
        assert_eq!(answer_calls.len(), 1);
        assert!(answer_calls[0].prompt.contains(&d.reflection.question));
        assert!(!answer_calls[0].prompt.contains(&record.question));
        let text = serialize_training_text(&d.reflective, &SpecialTokens::default()).unwrap();
        assert!(text.contains("I recommend ibuprofen for seven days. <Think>Question: Which antibiotic"));
        assert!(text.contains("<Modified>I recommend amoxicillin for seven days.</Modified>"));
    }

    #[test]
    fn question_regenerated_once_then_rejected() {
        let (record, art) = consult();
        let leaky = "My child has ear pain and a fever since yesterday, what should we do?";
        let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = calls.clone();
        let g = gw(move |r| {
            if r.tag.starts_with(TASK_REFLECT_QUESTION) {
                c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if r.tag.ends_with("|0") {
                    return leaky.into();
                }
            }
            happy(r)
        });
        build_reflection(&record, &art, &ReflectParams::default(), &g, &PromptCatalog::default()).unwrap();
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);

        let g = gw(move |r| if r.tag.starts_with(TASK_REFLECT_QUESTION) { "No question here".into() } else { happy(r) });
        assert!(matches!(
            build_reflection(&record, &art, &ReflectParams::default(), &g, &PromptCatalog::default()),
            Err(ReflectionError::QuestionRejected { .. })
        ));
    }

    #[test]
    fn answer_leak_and_no_change() {
        let (record, art) = consult();
        let g = gw(|r| {
            if r.tag.starts_with(TASK_REFLECT_ANSWER) {
                "Since your child has ear pain and a fever since yesterday, use amoxicillin.".into()
            } else {
                happy(r)
            }
        });
        assert!(matches!(
            build_reflection(&record, &art, &ReflectParams::default(), &g, &PromptCatalog::default()),
            Err(ReflectionError::LeakageDetected { .. })
        ));
        let g = gw(|r| if r.tag.starts_with(TASK_MODIFY) { "Ibuprofen.".into() } else { happy(r) });
        assert!(matches!(
            build_reflection(&record, &art, &ReflectParams::default(), &g, &PromptCatalog::default()),
            Err(ReflectionError::NoChangeProduced { .. })
        ));
    }

    fn mc() -> (QARecord, PinpointArtifact) {
        let record = QARecord {
            id: "mc-1".into(),
            source: Source::Multichoice,
            question: "Which drug irreversibly inhibits cyclooxygenase?".into(),
            options: Some(
                [('A', "Ibuprofen"), ('B', "Aspirin"), ('C', "Celecoxib")]
                    .into_iter()
                    .map(|(k, v)| (k, v.to_string()))
                    .collect(),
            ),
            gold: "B".into(),
            reasoning: String::new(),
        };
        let t = Trajectory::new(
            "mc-1",
            &["COX has two isoforms.", "Option A, ibuprofen, binds irreversibly.", "It is common."],
            "Therefore, the answer is (A).",
        )
        .unwrap()
        .with_error(1, "Option A, ibuprofen, binds irreversibly.")
        .unwrap();
        let pinpoint = Pinpoint {
            id: "mc-1#rg1-0".into(),
            record_id: "mc-1".into(),
            pathway: Pathway::Rg1,
            step_index: 1,
            erroneous_text: "Option A, ibuprofen, binds irreversibly.".into(),
            detail: PinpointDetail::Sentence {
                sampled_answer: String::new(),
                wrong_option: 'A',
            },
            transcript: vec![],
        };
        (record, PinpointArtifact { pinpoint, erroneous: t })
    }

    fn mc_reply(modify: &'static str) -> impl Fn(&ChatRequest) -> String + Send + Sync + 'static {
        move |r| match r.tag.split('|').next().unwrap() {
            TASK_REFLECT_QUESTION => "Which NSAID acetylates COX covalently?".into(),
            TASK_REFLECT_ANSWER => "Aspirin acetylates a serine residue of the enzyme.".into(),
            _ => modify.into(),
        }
    }

    #[test]
    fn rg1_modification_window() {
        let (record, art) = mc();
        let ok = "1. COX has two isoforms.\n2. Option B, aspirin, binds irreversibly.\n3. Ibuprofen is reversible.\n4. Therefore, the answer is (B).";
        let d = build_reflection(&record, &art, &ReflectParams::default(), &gw(mc_reply(ok)), &PromptCatalog::default()).unwrap();
        assert_eq!(d.corrected, "Option B, aspirin, binds irreversibly.");
        assert_eq!(d.reflective.answer, "Therefore, the answer is (B).");
        let text = serialize_training_text(&d.reflective, &SpecialTokens::default()).unwrap();
        assert!(text.ends_with("Ibuprofen is reversible.\nTherefore, the answer is (B)."));

        let wide = "1. COX-1 is constitutive.\n2. Option B, aspirin, binds irreversibly.\n3. It is common.\n4. Therefore, the answer is (B).";
        // sentence 1 is the i-1 neighbour, so it may change
        assert!(build_reflection(&record, &art, &ReflectParams::default(), &gw(mc_reply(wide)), &PromptCatalog::default()).is_ok());

        let short = "1. COX has two isoforms.\n2. Option B, aspirin.\n3. Therefore, the answer is (B).";
        assert!(matches!(
            build_reflection(&record, &art, &ReflectParams::default(), &gw(mc_reply(short)), &PromptCatalog::default()),
            Err(ReflectionError::MalformedModification { .. })
        ));
        let same = "1. COX has two isoforms.\n2. Option A, ibuprofen, binds irreversibly.\n3. It is common.\n4. Therefore, the answer is (B).";
        assert!(matches!(
            build_reflection(&record, &art, &ReflectParams::default(), &gw(mc_reply(same)), &PromptCatalog::default()),
            Err(ReflectionError::NoChangeProduced { .. })
        ));
        let stuck = "1. COX has two isoforms.\n2. Ibuprofen binds irreversibly.\n3. It is common.\n4. Therefore, the answer is (A).";
        assert!(matches!(
            build_reflection(&record, &art, &ReflectParams::default(), &gw(mc_reply(stuck)), &PromptCatalog::default()),
            Err(ReflectionError::NoChangeProduced { .. })
        ));
    }

    #[test]
    fn option_references_rejected() {
        let (record, _) = mc();
        assert!(question_problem(&record, "Why is option A wrong?").is_some());
        assert!(question_problem(&record, "Is (C) selective?").is_some());
        assert!(question_problem(&record, "Which NSAID acetylates COX?").is_none());
        assert!(question_problem(&record, "Which NSAID acetylates COX").is_some());
    }
}
