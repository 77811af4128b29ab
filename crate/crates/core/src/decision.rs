//! Multiple-choice decision extraction shared by pinpoint sampling, the
//! quality filter and the evaluation harness.
//!
//! All patterns are scanned and the match that starts last in the text wins.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no decision found")]
pub struct NoDecisionFound;

fn patterns() -> &'static [Regex] {
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        [
            // "the answer is (C)", "correct answer is: C", "best choice is D"
            r"(?i:\b(?:answer|choice|option)\s+(?:is|would\s+be|=)\s*:?\s*(?:option\s+|choice\s+)?)\(?([A-J])\)?(?:\b|$)",
            // "Final answer: D", "Answer: (B)"
            r"(?i:\b(?:final\s+)?answer\s*:\s*(?:option\s+)?)\(?([A-J])\)?(?:\b|$)",
            // "option B is correct", "(B) is the best"
            r"(?i:\b(?:option|choice)\s+)\(?([A-J])\)?(?i:\s+is\s+(?:the\s+)?(?:correct|best|right|most\s+likely))",
            r"\(([A-J])\)(?i:\s+is\s+(?:the\s+)?(?:correct|best|right|most\s+likely))",
            // "I choose B", "I would select (C)"
            r"(?i:\b(?:choose|select|pick)\s+(?:option\s+)?)\(?([A-J])\)?(?:\b|$)",
            // a bare trailing letter: "... \n\nC" or "... (D)."
            r"(?:^|\s)\(?([A-J])\)?\.?\s*$",
        ]
        .iter()
        .map(|p| Regex::new(p).unwrap())
        .collect()
    })
}

/// Extracts the multiple-choice decision from free text.
pub fn extract_decision(answer_text: &str, option_letters: &[char]) -> Result<char, NoDecisionFound> {
    let mut best: Option<(usize, char)> = None;
    for re in patterns() {
        for caps in re.captures_iter(answer_text) {
            let m = caps.get(1).unwrap();
            let letter = m.as_str().chars().next().unwrap();
            if !option_letters.contains(&letter) {
                continue;
            }
            let start = caps.get(0).unwrap().start();
            if best.is_none_or(|(s, _)| start >= s) {
                best = Some((start, letter));
            }
        }
    }
    best.map(|(_, l)| l).ok_or(NoDecisionFound)
}

/// How [`extract_choice`] falls back when no letter pattern matches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExtractionPolicy {
    /// Match option text verbatim (case-insensitive); the last occurrence wins.
    pub match_option_text: bool,
}

pub fn extract_choice(
    response: &str,
    options: &BTreeMap<char, String>,
    policy: ExtractionPolicy,
) -> Result<char, NoDecisionFound> {
    let letters: Vec<char> = options.keys().copied().collect();
    if let Ok(l) = extract_decision(response, &letters) {
        return Ok(l);
    }
    if !policy.match_option_text {
        return Err(NoDecisionFound);
    }
    let lower = response.to_lowercase();
    options
        .iter()
        .filter(|(_, text)| !text.trim().is_empty())
        .filter_map(|(l, text)| lower.rfind(&text.trim().to_lowercase()).map(|at| (at, *l)))
        .max()
        .map(|(_, l)| l)
        .ok_or(NoDecisionFound)
}
