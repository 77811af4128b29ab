//! Deterministic stand-in for a medical chat model.
//!
//! Knows the records it is asked about (by id, from the request tag) and a
//! small typed lexicon. Every stochastic choice is a hash of the seed and the
//! request tag, so replies do not depend on call order or thread scheduling.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use super::{Backend, ChatRequest, ChatResponse, GatewayError};
use crate::corpus::QARecord;
use crate::pinpoint::EntityType;
use crate::seed;
use crate::text::{normalize_for_match, normalize_ws, replace_first, split_sentences};

pub const LEXICON: &[(EntityType, &[&str])] = &[
    (
        EntityType::Drug,
        &[
            "amoxicillin", "ibuprofen", "metformin", "omeprazole", "paracetamol", "azithromycin", "lisinopril",
            "cetirizine", "prednisone", "ciprofloxacin",
        ],
    ),
    (
        EntityType::Disease,
        &[
            "hypertension", "diabetes", "gastritis", "migraine", "asthma", "pneumonia", "otitis media", "sinusitis",
            "anemia", "eczema",
        ],
    ),
    (
        EntityType::Test,
        &["blood test", "ultrasound", "x-ray", "ECG", "MRI", "urinalysis", "CT scan", "endoscopy"],
    ),
    (
        EntityType::Anatomy,
        &["stomach", "liver", "kidney", "lungs", "sinuses", "throat", "skin", "heart"],
    ),
    (
        EntityType::Treatment,
        &["physiotherapy", "rest", "hydration", "surgery", "steam inhalation", "dietary changes"],
    ),
    (
        EntityType::Etiology,
        &["bacterial infection", "viral infection", "stress", "allergy", "acid reflux", "dehydration"],
    ),
];

fn terms_of(t: EntityType) -> &'static [&'static str] {
    LEXICON.iter().find(|(k, _)| *k == t).map(|(_, v)| *v).unwrap_or(&[])
}

fn term_patterns() -> &'static [(EntityType, &'static str, Regex)] {
    static RE: OnceLock<Vec<(EntityType, &'static str, Regex)>> = OnceLock::new();
    RE.get_or_init(|| {
        LEXICON
            .iter()
            .flat_map(|(t, terms)| {
                terms.iter().map(move |term| {
                    let re = Regex::new(&format!(r"(?i)\b{}\b", regex::escape(term))).unwrap();
                    (*t, *term, re)
                })
            })
            .collect()
    })
}

/// Lexicon terms in `text`, by first occurrence, with their surface form.
pub fn lexicon_mentions(text: &str) -> Vec<(String, EntityType)> {
    let mut hits: Vec<(usize, String, EntityType)> = Vec::new();
    for (t, _, re) in term_patterns() {
        if let Some(m) = re.find(text) {
            hits.push((m.start(), m.as_str().to_string(), *t));
        }
    }
    hits.sort_by_key(|h| h.0);
    hits.into_iter().map(|(_, s, t)| (s, t)).collect()
}

const RG1_INTROS: &[&str] = &[
    "The key findings point to a specific underlying mechanism.",
    "Working through the clinical details narrows the differential.",
    "The stem highlights a classic association worth recalling.",
    "Each choice should be weighed against the core concept tested.",
];

/// Simulated model over a fixed record set.
pub struct SimulatedModel {
    records: HashMap<String, QARecord>,
    seed: u64,
    /// Probability that a multiple-choice answer is correct, before the
    /// per-record offset.
    pub competence: f64,
    /// Probability that a filter trial recovers the right answer is drawn per
    /// draft from this range.
    pub filter_success: (f64, f64),
}

impl SimulatedModel {
    pub fn new(records: impl IntoIterator<Item = QARecord>, seed: u64) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
            seed,
            competence: 0.45,
            filter_success: (0.3, 1.0),
        }
    }

    fn u(&self, parts: &[&str]) -> f64 {
        seed::unit(self.seed, parts)
    }

    fn pick<'a, T>(&self, items: &'a [T], parts: &[&str]) -> Option<&'a T> {
        if items.is_empty() {
            return None;
        }
        let i = (seed::stable_hash(self.seed, parts) % items.len() as u64) as usize;
        items.get(i)
    }

    fn record(&self, tag_part: Option<&str>) -> Option<&QARecord> {
        let id = tag_part?;
        // pinpoint ids are "<record>#<suffix>"
        let id = id.split('#').next().unwrap_or(id);
        self.records.get(id)
    }

    fn answer_mc(&self, record: &QARecord, tag: &str) -> Option<char> {
        let gold = record.gold_letter()?;
        let bias = self.u(&[&record.id, "competence"]) - 0.5;
        let p = (self.competence + 0.6 * bias).clamp(0.05, 0.95);
        if self.u(&[tag, "correct"]) < p {
            return Some(gold);
        }
        let wrong: Vec<char> = record.option_letters().into_iter().filter(|&l| l != gold).collect();
        // a favourite distractor most of the time
        if self.u(&[tag, "spread"]) < 0.75 {
            self.pick(&wrong, &[&record.id, "distractor"]).copied()
        } else {
            self.pick(&wrong, &[tag, "distractor"]).copied()
        }
    }

    fn option_sentence(record: &QARecord, letter: char) -> String {
        let text = record
            .options
            .as_ref()
            .and_then(|o| o.get(&letter))
            .map(String::as_str)
            .unwrap_or("");
        format!("Option {letter}, {}, best explains the presentation described.", text.to_lowercase())
    }

    fn sample_mc(&self, record: &QARecord, tag: &str) -> String {
        let Some(choice) = self.answer_mc(record, tag) else {
            return "I am not sure.".into();
        };
        let intro = self.pick(RG1_INTROS, &[tag, "intro"]).unwrap();
        format!(
            "{intro} {} The remaining options are less consistent with the findings. Therefore, the answer is ({choice}).",
            Self::option_sentence(record, choice)
        )
    }

    fn sentences(record: &QARecord) -> Vec<String> {
        split_sentences(&record.reasoning).iter().map(|s| normalize_ws(s)).collect()
    }

    /// Recovers the masked term by matching the masked sentence against the
    /// record's sentences.
    fn unmask_truth(record: &QARecord, masked: &str) -> Option<(String, EntityType)> {
        let ph = Regex::new(r"\[([A-Z]+)\]").unwrap();
        let m = ph.find(masked)?;
        let ty: EntityType = m.as_str()[1..m.as_str().len() - 1].to_lowercase().parse().ok()?;
        let (pre, suf) = (&masked[..m.start()], &masked[m.end()..]);
        Self::sentences(record).into_iter().find_map(|s| {
            (s.len() > pre.len() + suf.len() && s.starts_with(pre) && s.ends_with(suf))
                .then(|| (s[pre.len()..s.len() - suf.len()].to_string(), ty))
        })
    }

    /// Finds which term `wrong` replaced in `statement`.
    fn truth_for_statement(record: &QARecord, statement: &str, wrong: Option<&str>) -> Option<(String, String)> {
        let statement = normalize_ws(statement);
        for s in Self::sentences(record) {
            for (surface, _) in lexicon_mentions(&s) {
                let candidates: Vec<String> = match wrong {
                    Some(w) => vec![w.to_string()],
                    None => term_patterns()
                        .iter()
                        .filter_map(|(_, t, re)| re.find(&statement).map(|_| t.to_string()))
                        .collect(),
                };
                for w in candidates {
                    if replace_first(&s, &surface, &w).as_deref() == Some(statement.as_str()) {
                        return Some((surface.clone(), s.clone()));
                    }
                }
            }
        }
        None
    }

    fn wrong_term(&self, ty: EntityType, truth: &str, parts: &[&str]) -> String {
        let others: Vec<&str> = terms_of(ty)
            .iter()
            .copied()
            .filter(|t| normalize_for_match(t) != normalize_for_match(truth))
            .collect();
        self.pick(&others, parts).map(|s| s.to_string()).unwrap_or_else(|| "unknown".into())
    }

    fn fill(&self, record: &QARecord, tag: &str, parts: &[&str], prompt: &str) -> String {
        let masked = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Sentence: "))
            .unwrap_or("")
            .trim();
        let Some((truth, ty)) = Self::unmask_truth(record, masked) else {
            return "unknown".into();
        };
        let entity = parts.get(2).copied().unwrap_or("0");
        let difficulty = self.u(&[&record.id, entity, "difficulty"]);
        if self.u(&[tag, "fill"]) >= difficulty {
            return truth;
        }
        if self.u(&[tag, "spread"]) < 0.8 {
            self.wrong_term(ty, &truth, &[&record.id, entity, "favourite"])
        } else {
            self.wrong_term(ty, &truth, &[tag, "other"])
        }
    }

    fn modify_rg1(&self, record: &QARecord, prompt: &str) -> String {
        let num = Regex::new(r"^(\d+)\. (.*)$").unwrap();
        let lines: Vec<String> = prompt
            .lines()
            .filter_map(|l| num.captures(l).map(|c| c[2].to_string()))
            .collect();
        let target: usize = Regex::new(r"Rewrite sentence (\d+)")
            .unwrap()
            .captures(prompt)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(1);
        let Some(gold) = record.gold_letter() else {
            return prompt.to_string();
        };
        let n = lines.len();
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let text = if i + 1 == target {
                    Self::option_sentence(record, gold)
                } else if i + 1 == n {
                    format!("Therefore, the answer is ({gold}).")
                } else {
                    l.clone()
                };
                format!("{}. {text}", i + 1)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn modify_rg2(&self, record: &QARecord, tag: &str, prompt: &str) -> String {
        let re = Regex::new(r#"In the statement "(.*)", the (\w+) "(.*)" is inaccurate\."#).unwrap();
        let Some(c) = re.captures(prompt) else {
            return "unknown".into();
        };
        let ty: EntityType = c[2].parse().unwrap_or(EntityType::Other);
        let Some((truth, _)) = Self::truth_for_statement(record, &c[1], Some(&c[3])) else {
            return "unknown".into();
        };
        if self.u(&[tag, "modify"]) < 0.9 {
            truth
        } else {
            self.wrong_term(ty, &truth, &[tag, "modify-wrong"])
        }
    }

    fn filter_trial(&self, record: &QARecord, tag: &str, draft: &str, prompt: &str) -> String {
        let (lo, hi) = self.filter_success;
        let p = lo + (hi - lo) * self.u(&[draft, "filter"]);
        let success = self.u(&[tag, "trial"]) < p;
        if let Some(gold) = record.gold_letter() {
            let choice = if success {
                gold
            } else {
                let wrong: Vec<char> = record.option_letters().into_iter().filter(|&l| l != gold).collect();
                *self.pick(&wrong, &[tag, "wrong"]).unwrap_or(&gold)
            };
            return format!(
                "The self-check changes the key consideration. {} Therefore, the answer is ({choice}).",
                Self::option_sentence(record, choice)
            );
        }
        let statement = prompt
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Statement: "))
            .unwrap_or("")
            .trim()
            .to_string();
        match Self::truth_for_statement(record, &statement, None) {
            Some((_, original)) if success => original,
            _ => statement,
        }
    }

    fn judge(prompt: &str) -> String {
        let re = Regex::new(r#"term is "(.*)"\. Would "(.*)" mean"#).unwrap();
        match re.captures(prompt) {
            Some(c) if normalize_for_match(&c[1]) == normalize_for_match(&c[2]) => "yes".into(),
            _ => "no".into(),
        }
    }

    fn reflect_question(&self, record: &QARecord, tag: &str, prompt: &str) -> String {
        if record.gold_letter().is_some() {
            let bank = [
                "Which mechanism best accounts for the findings described in this case?",
                "What is the defining feature that separates the correct diagnosis from its mimics?",
                "Which physiological principle determines the right choice here?",
            ];
            return self.pick(&bank, &[tag, "q"]).unwrap().to_string();
        }
        let ty = Regex::new(r"\b(drug|disease|test|anatomy|treatment|etiology)\b")
            .unwrap()
            .find(prompt)
            .map(|m| m.as_str())
            .unwrap_or("term");
        let flawed = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Flawed statement: "))
            .unwrap_or("");
        let kind = lexicon_mentions(flawed)
            .last()
            .map(|(_, t)| t.as_str())
            .unwrap_or(ty);
        format!("Which {kind} is appropriate for the clinical picture described in my reply?")
    }

    fn reflect_answer(&self, tag: &str) -> String {
        let bank = [
            "The choice should follow current clinical guidelines for the most likely cause.",
            "It depends on the underlying cause, and first-line options come from established guidelines.",
            "The standard approach targets the most probable mechanism identified by the findings.",
        ];
        self.pick(&bank, &[tag, "a"]).unwrap().to_string()
    }
}

impl Backend for SimulatedModel {
    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let parts: Vec<&str> = req.tag.split('|').collect();
        let task = parts.first().copied().unwrap_or("");
        let prompt = req.last_user();
        let record = self.record(parts.get(1).copied());
        let text = match (task, record) {
            ("relevance", _) => {
                if lexicon_mentions(prompt).is_empty() && crate::corpus::keyword_hits(prompt) == 0 {
                    "no".into()
                } else {
                    "yes".into()
                }
            }
            ("rg1.sample", Some(r)) => self.sample_mc(r, &req.tag),
            ("rg2.extract", Some(r)) => {
                let items: Vec<serde_json::Value> = lexicon_mentions(&r.reasoning)
                    .into_iter()
                    .map(|(s, t)| serde_json::json!({"entity": s, "type": t.as_str()}))
                    .collect();
                serde_json::Value::Array(items).to_string()
            }
            ("rg2.fill", Some(r)) => self.fill(r, &req.tag, &parts, prompt),
            ("judge.equivalence", _) => Self::judge(prompt),
            ("reflect.question", Some(r)) => self.reflect_question(r, &req.tag, prompt),
            ("reflect.answer", _) => self.reflect_answer(&req.tag),
            ("reflect.modify", Some(r)) if r.gold_letter().is_some() => self.modify_rg1(r, prompt),
            ("reflect.modify", Some(r)) => self.modify_rg2(r, &req.tag, prompt),
            ("filter", Some(r)) => self.filter_trial(r, &req.tag, parts[1], prompt),
            ("eval.answer", Some(r)) => {
                // greedy decoding ignores the repeat index
                let key = match req.params.temperature {
                    t if t <= 0.0 => parts[..2].join("|"),
                    _ => req.tag.clone(),
                };
                let choice = self.answer_mc(r, &key).unwrap_or('A');
                format!("Considering the findings carefully. Therefore, the answer is ({choice}).")
            }
            _ => super::seeded_text(self.seed, req),
        };
        Ok(ChatResponse::stop(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    #[test]
    fn mentions_in_order_with_word_boundaries() {
        let m = lexicon_mentions("Restrict salt; take Lisinopril for hypertension and rest.");
        let names: Vec<&str> = m.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(names, ["Lisinopril", "hypertension", "rest"]);
    }

    #[test]
    fn truth_recovery() {
        let r = QARecord {
            id: "c".into(),
            source: Source::Consultation,
            question: "q".into(),
            options: None,
            gold: String::new(),
            reasoning: "You may have gastritis. Take omeprazole before meals. Avoid spicy food.".into(),
        };
        assert_eq!(
            SimulatedModel::unmask_truth(&r, "Take [DRUG] before meals."),
            Some(("omeprazole".into(), EntityType::Drug))
        );
        assert_eq!(
            SimulatedModel::truth_for_statement(&r, "Take ibuprofen before meals.", None),
            Some(("omeprazole".into(), "Take omeprazole before meals.".into()))
        );
    }
}
