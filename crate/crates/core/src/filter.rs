//! Quality filter: replay each draft's reflection several times with the
//! filter model and keep drafts whose reflection fixes the error often enough.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_yes_no, QARecord};
use crate::decision::extract_decision;
use crate::gateway::{ChatRequest, Gateway, GenerationParams, FILTER_TEMPERATURE, STABLE_TEMPERATURE};
use crate::par;
use crate::pinpoint::{Pathway, TASK_JUDGE};
use crate::prompts::{self, PromptCatalog, PromptError};
use crate::reflection::ReflectionDraft;
use crate::text::{normalize_for_match, normalize_ws};

pub const TASK_FILTER: &str = "filter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub trials: usize,
    pub retain_threshold: usize,
    pub temperature: f32,
    pub judge_temperature: f32,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            trials: 10,
            retain_threshold: 6,
            temperature: FILTER_TEMPERATURE,
            judge_temperature: STABLE_TEMPERATURE,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.trials == 0 {
            return Err("filter.trials must be >= 1".into());
        }
        if self.retain_threshold == 0 || self.retain_threshold > self.trials {
            return Err(format!(
                "filter.retain_threshold must be in 1..={}, got {}",
                self.trials, self.retain_threshold
            ));
        }
        Ok(())
    }
}

/// Keep rule: at least `threshold` successful trials.
pub fn retain(successes: usize, threshold: usize) -> bool {
    successes >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Success,
    Failure,
    NoDecision,
    JudgeUnavailable,
    GatewayError,
}

impl TrialOutcome {
    pub fn is_success(self) -> bool {
        self == TrialOutcome::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub instance_id: String,
    pub record_id: String,
    pub pathway: Pathway,
    pub trials: usize,
    pub successes: usize,
    pub retained: bool,
    pub per_trial: Vec<TrialOutcome>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub total: usize,
    pub retained: usize,
    pub by_pathway: BTreeMap<String, Counts>,
    pub by_source: BTreeMap<String, Counts>,
    /// Histogram of success counts, index = successes.
    pub success_histogram: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub retained: Vec<ReflectionDraft>,
    pub verdicts: Vec<FilterVerdict>,
    pub summary: FilterSummary,
}

/// Splits a masked sentence around its placeholder.
fn frame(masked: &str, placeholder: &str) -> Option<(String, String)> {
    let at = masked.find(placeholder)?;
    Some((
        normalize_ws(&masked[..at]).to_lowercase(),
        normalize_ws(&masked[at + placeholder.len()..]).to_lowercase(),
    ))
}

/// Term in `revised` that sits where the placeholder was, if the rest of the
/// sentence is unchanged.
pub fn extract_term(revised: &str, masked: &str, placeholder: &str) -> Option<String> {
    let (pre, suf) = frame(masked, placeholder)?;
    let r = normalize_ws(revised);
    let lower = r.to_lowercase();
    if lower.len() != r.len() || !lower.starts_with(&pre) || !lower.ends_with(&suf) || pre.len() + suf.len() > r.len() {
        return None;
    }
    let term = r[pre.len()..r.len() - suf.len()].trim();
    (!term.is_empty()).then(|| term.to_string())
}

fn trial_request(
    draft: &ReflectionDraft,
    record: &QARecord,
    trial: usize,
    params: &FilterParams,
    prompts: &PromptCatalog,
) -> Result<ChatRequest, PromptError> {
    let r = &draft.reflection;
    let response = draft.erroneous.render();
    let user = match draft.pathway() {
        Pathway::Rg1 => prompts.render(
            prompts::FILTER_RG1,
            &[
                ("question", &record.question),
                ("options", &record.options_block()),
                ("erroneous_response", &response),
                ("reflection_question", &r.question),
                ("reflection_answer", &r.answer),
            ],
        )?,
        Pathway::Rg2 => prompts.render(
            prompts::FILTER_RG2,
            &[
                ("question", &record.question),
                ("erroneous_response", &response),
                ("reflection_question", &r.question),
                ("reflection_answer", &r.answer),
                ("erroneous_step", &draft.pinpoint.erroneous_text),
            ],
        )?,
    };
    Ok(ChatRequest::prompt(
        format!("{TASK_FILTER}|{}|{trial}", draft.id),
        Some(prompts.system()),
        user,
        GenerationParams::with_temperature(params.temperature),
    ))
}

fn score_rg1(record: &QARecord, text: &str) -> TrialOutcome {
    match (extract_decision(text, &record.option_letters()), record.gold_letter()) {
        (Ok(d), Some(g)) if d == g => TrialOutcome::Success,
        (Ok(_), _) => TrialOutcome::Failure,
        (Err(_), _) => TrialOutcome::NoDecision,
    }
}

fn score_rg2(
    draft: &ReflectionDraft,
    text: &str,
    trial: usize,
    params: &FilterParams,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Result<TrialOutcome, PromptError> {
    let Some(e) = draft.pinpoint.masked_entity() else {
        return Ok(TrialOutcome::Failure);
    };
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line.strip_prefix("Statement:").unwrap_or(line);
    let truth = normalize_for_match(&e.surface);
    let Some(term) = extract_term(line, &e.masked_sentence, &e.entity_type.placeholder()) else {
        // sentence was rewritten beyond the term: accept only an unambiguous fix
        let n = normalize_for_match(line);
        let fixed = n.contains(&truth) && !n.contains(&normalize_for_match(&e.wrong_fill));
        return Ok(if fixed { TrialOutcome::Success } else { TrialOutcome::Failure });
    };
    let cand = normalize_for_match(&term);
    if cand == truth {
        return Ok(TrialOutcome::Success);
    }
    if cand == normalize_for_match(&e.wrong_fill) {
        return Ok(TrialOutcome::Failure);
    }
    let user = prompts.render(
        prompts::JUDGE_EQUIVALENCE,
        &[
            ("entity_type", e.entity_type.as_str()),
            ("expected", &e.surface),
            ("candidate", &term),
            ("sentence", &draft.corrected),
        ],
    )?;
    let req = ChatRequest::prompt(
        format!("{TASK_JUDGE}|{}|filter|{trial}", draft.id),
        Some(prompts.system()),
        user,
        GenerationParams::with_temperature(params.judge_temperature),
    );
    Ok(match gateway.complete(&req).ok().and_then(|r| parse_yes_no(&r.content)) {
        Some(true) => TrialOutcome::Success,
        Some(false) => TrialOutcome::Failure,
        None => TrialOutcome::JudgeUnavailable,
    })
}

/// Runs all trials for one draft. Gateway errors count as failed trials.
pub fn evaluate_instance(
    record: &QARecord,
    draft: &ReflectionDraft,
    params: &FilterParams,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Result<FilterVerdict, PromptError> {
    let reqs = (0..params.trials)
        .map(|t| trial_request(draft, record, t, params, prompts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_trial = Vec::with_capacity(params.trials);
    for (t, reply) in gateway.complete_many(&reqs).into_iter().enumerate() {
        let outcome = match reply {
            Err(_) => TrialOutcome::GatewayError,
            Ok(r) => match draft.pathway() {
                Pathway::Rg1 => score_rg1(record, &r.content),
                Pathway::Rg2 => score_rg2(draft, &r.content, t, params, gateway, prompts)?,
            },
        };
        per_trial.push(outcome);
    }
    let successes = per_trial.iter().filter(|o| o.is_success()).count();
    Ok(FilterVerdict {
        instance_id: draft.id.clone(),
        record_id: draft.record_id.clone(),
        pathway: draft.pathway(),
        trials: params.trials,
        successes,
        retained: retain(successes, params.retain_threshold),
        per_trial,
    })
}

/// Retained drafts and summary counts for drafts paired with their verdicts.
pub fn summarize(
    drafts: &[ReflectionDraft],
    verdicts: &[FilterVerdict],
    params: &FilterParams,
) -> (Vec<ReflectionDraft>, FilterSummary) {
    let mut summary = FilterSummary {
        success_histogram: vec![0; params.trials + 1],
        ..Default::default()
    };
    let mut retained = Vec::new();
    for (d, v) in drafts.iter().zip(verdicts) {
        summary.total += 1;
        summary.success_histogram[v.successes.min(params.trials)] += 1;
        let p = summary.by_pathway.entry(v.pathway.to_string()).or_default();
        p.total += 1;
        p.retained += v.retained as usize;
        let s = summary.by_source.entry(d.source.as_str().to_string()).or_default();
        s.total += 1;
        s.retained += v.retained as usize;
        if v.retained {
            summary.retained += 1;
            retained.push(d.clone());
        }
    }
    (retained, summary)
}

/// Filters drafts in parallel. Drafts whose record is missing from `lookup`
/// are discarded with zero successes.
pub fn filter_dataset<'r, L>(
    drafts: &[ReflectionDraft],
    lookup: L,
    params: &FilterParams,
    gateway: &Gateway,
    prompts: &PromptCatalog,
) -> Result<FilterReport, PromptError>
where
    L: Fn(&str) -> Option<&'r QARecord> + Sync,
{
    let verdicts = par::map(drafts, |d| match lookup(&d.record_id) {
        Some(r) => evaluate_instance(r, d, params, gateway, prompts),
        None => Ok(FilterVerdict {
            instance_id: d.id.clone(),
            record_id: d.record_id.clone(),
            pathway: d.pathway(),
            trials: 0,
            successes: 0,
            retained: false,
            per_trial: Vec::new(),
        }),
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let (retained, summary) = summarize(drafts, &verdicts, params);
    Ok(FilterReport {
        retained,
        verdicts,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_rule_boundary() {
        assert!(retain(6, 6));
        assert!(!retain(5, 6));
        assert!(retain(10, 6));
        assert!(!retain(0, 6));
    }

    #[test]
    fn term_extraction() {
        let masked = "I recommend [DRUG] for seven days.";
        assert_eq!(
            extract_term("I recommend Amoxicillin for seven days.", masked, "[DRUG]").as_deref(),
            Some("Amoxicillin")
        );
        assert_eq!(
            extract_term("i recommend  high-dose amoxicillin for seven days.", masked, "[DRUG]").as_deref(),
            Some("high-dose amoxicillin")
        );
        assert_eq!(extract_term("Take amoxicillin for a week.", masked, "[DRUG]"), None);
        assert_eq!(extract_term("I recommend for seven days.", masked, "[DRUG]"), None);
    }

    #[test]
    fn params_validation() {
        assert!(FilterParams::default().validate().is_ok());
        let bad = FilterParams {
            retain_threshold: 11,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
