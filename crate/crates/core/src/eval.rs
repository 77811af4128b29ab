//! Multiple-choice evaluation of any chat endpoint, with optional repeats and
//! reflection-block statistics over the raw responses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QARecord;
use crate::decision::{extract_choice, ExtractionPolicy};
use crate::gateway::{ChatRequest, Gateway, GenerationParams};
use crate::prompts::{self, PromptCatalog, PromptError};
use crate::trajectory::{count_reflection_blocks, SpecialTokens};

pub const TASK_EVAL: &str = "eval.answer";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparsedPolicy {
    /// Unparseable responses score as wrong.
    #[default]
    Incorrect,
    /// Unparseable responses are left out of the denominator.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub repeats: usize,
    pub temperature: f32,
    pub unparsed: UnparsedPolicy,
    pub match_option_text: bool,
    pub max_items: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 1,
            temperature: 0.0,
            unparsed: UnparsedPolicy::Incorrect,
            match_option_text: false,
            max_items: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub repeat: usize,
    pub gold: char,
    pub decision: Option<char>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub reflection_blocks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub correct: usize,
    pub scored: usize,
    pub unparsed: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionStats {
    pub responses: usize,
    pub with_reflection: usize,
    pub fraction: f64,
    /// Mean blocks per response, over all responses.
    pub mean_blocks: f64,
    /// Mean blocks over responses that contain at least one block.
    pub mean_blocks_when_present: Option<f64>,
    pub unbalanced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub benchmark: String,
    pub items: usize,
    pub repeats: Vec<RepeatResult>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub reflection: Option<ReflectionStats>,
    pub predictions: Vec<Prediction>,
}

/// Block statistics over raw responses. Unbalanced responses count as zero
/// blocks and are reported separately.
pub fn reflection_statistics(responses: &[&str], tokens: &SpecialTokens) -> Option<ReflectionStats> {
    if responses.is_empty() {
        return None;
    }
    let counts: Vec<Option<usize>> = responses.iter().map(|r| count_reflection_blocks(r, tokens)).collect();
    Some(stats_from_counts(&counts))
}

fn stats_from_counts(counts: &[Option<usize>]) -> ReflectionStats {
    let n = counts.len();
    let unbalanced = counts.iter().filter(|c| c.is_none()).count();
    let blocks: Vec<usize> = counts.iter().map(|c| c.unwrap_or(0)).collect();
    let with = blocks.iter().filter(|&&b| b > 0).count();
    let total: usize = blocks.iter().sum();
    ReflectionStats {
        responses: n,
        with_reflection: with,
        fraction: with as f64 / n as f64,
        mean_blocks: total as f64 / n as f64,
        mean_blocks_when_present: (with > 0).then(|| total as f64 / with as f64),
        unbalanced,
    }
}

/// Mean of per-repeat accuracies. With equal denominators this is computed
/// as one exact ratio of counts.
fn mean_accuracy(repeats: &[RepeatResult]) -> (Option<f64>, Option<f64>) {
    let accs: Vec<f64> = repeats.iter().filter_map(|r| r.accuracy).collect();
    if accs.is_empty() {
        return (None, None);
    }
    let scored: Vec<usize> = repeats.iter().filter(|r| r.accuracy.is_some()).map(|r| r.scored).collect();
    let mean = if scored.iter().all(|&s| s == scored[0]) {
        let correct: usize = repeats.iter().filter(|r| r.accuracy.is_some()).map(|r| r.correct).sum();
        correct as f64 / (scored[0] * accs.len()) as f64
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    (Some(mean), Some(var.sqrt()))
}

pub fn evaluate(
    benchmark: &str,
    items: &[QARecord],
    config: &EvalConfig,
    gateway: &Gateway,
    prompts: &PromptCatalog,
    tokens: &SpecialTokens,
) -> Result<EvalResult, PromptError> {
    let items: Vec<&QARecord> = items
        .iter()
        .filter(|r| r.gold_letter().is_some())
        .take(config.max_items.unwrap_or(usize::MAX))
        .collect();
    let repeats = config.repeats.max(1);
    let mut reqs = Vec::with_capacity(items.len() * repeats);
    for rep in 0..repeats {
        for item in &items {
            let user = prompts.render(
                prompts::EVAL_ANSWER,
                &[("question", &item.question), ("options", &item.options_block())],
            )?;
            reqs.push(ChatRequest::prompt(
                format!("{TASK_EVAL}|{}|{rep}", item.id),
                Some(prompts.system()),
                user,
                GenerationParams::with_temperature(config.temperature),
            ));
        }
    }
    let replies = gateway.complete_many(&reqs);
    let policy = ExtractionPolicy {
        match_option_text: config.match_option_text,
    };

    let mut predictions = Vec::with_capacity(replies.len());
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut block_counts = Vec::with_capacity(replies.len());
    let mut replies = replies.into_iter();
    for rep in 0..repeats {
        let (mut correct, mut unparsed) = (0, 0);
        for item in &items {
            let gold = item.gold_letter().expect("filtered above");
            let reply = replies.next().expect("one reply per request");
            let (decision, error, blocks) = match reply {
                Ok(r) => {
                    let opts = item.options.clone().unwrap_or_default();
                    let blocks = count_reflection_blocks(&r.content, tokens);
                    block_counts.push(blocks);
                    (extract_choice(&r.content, &opts, policy).ok(), None, blocks)
                }
                Err(e) => (None, Some(e.to_string()), None),
            };
            if decision.is_none() {
                unparsed += 1;
            }
            let ok = decision == Some(gold);
            correct += ok as usize;
            predictions.push(Prediction {
                item_id: item.id.clone(),
                repeat: rep,
                gold,
                decision,
                correct: ok,
                error,
                reflection_blocks: blocks,
            });
        }
        let scored = match config.unparsed {
            UnparsedPolicy::Incorrect => items.len(),
            UnparsedPolicy::Exclude => items.len() - unparsed,
        };
        per_repeat.push(RepeatResult {
            repeat: rep,
            correct,
            scored,
            unparsed,
            accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
        });
    }
    let (mean, std) = mean_accuracy(&per_repeat);
    Ok(EvalResult {
        benchmark: benchmark.to_string(),
        items: items.len(),
        repeats: per_repeat,
        mean_accuracy: mean,
        std_accuracy: std,
        reflection: (!block_counts.is_empty()).then(|| stats_from_counts(&block_counts)),
        predictions,
    })
}

/// Writes one CSV row per prediction.
pub fn write_predictions_csv(path: &Path, result: &EvalResult) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["benchmark", "item_id", "repeat", "gold", "decision", "correct", "reflection_blocks"])?;
    for p in &result.predictions {
        w.write_record([
            result.benchmark.as_str(),
            &p.item_id,
            &p.repeat.to_string(),
            &p.gold.to_string(),
            &p.decision.map(String::from).unwrap_or_default(),
            &p.correct.to_string(),
            &p.reflection_blocks.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_stats_counts() {
        let t = SpecialTokens::default();
        let rs = [
            "plain answer",
            "a <Think>Question: q?\nAnswer: a</Think> <Modified>b</Modified>\nend",
            "x <Think>Question: q?</Think> y <Think>Answer: z</Think>",
            "broken <Think> never closed",
        ];
        let s = reflection_statistics(&rs, &t).unwrap();
        assert_eq!(s.responses, 4);
        assert_eq!(s.with_reflection, 2);
        assert_eq!(s.unbalanced, 1);
        assert_eq!(s.fraction, 0.5);
        assert_eq!(s.mean_blocks, 0.75);
        assert_eq!(s.mean_blocks_when_present, Some(1.5));
        assert!(reflection_statistics(&[], &t).is_none());
    }

    #[test]
    fn unequal_denominators_fall_back_to_mean_of_ratios() {
        let r = |correct, scored| RepeatResult {
            repeat: 0,
            correct,
            scored,
            unparsed: 0,
            accuracy: Some(correct as f64 / scored as f64),
        };
        let (m, _) = mean_accuracy(&[r(1, 2), r(1, 4)]);
        assert_eq!(m, Some(0.375));
        let (m, s) = mean_accuracy(&[r(13, 20), r(13, 20)]);
        assert_eq!(m, Some(0.65));
        assert_eq!(s, Some(0.0));
    }
}
