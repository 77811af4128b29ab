//! Source corpora: consultation transcripts and multiple-choice questions,
//! loaded into [`QARecord`]s and screened before pinpoint generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GenerationParams, STABLE_TEMPERATURE};
use crate::prompts::{self, PromptCatalog};
use crate::text::split_sentences;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("reading {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path}:{line}: schema mismatch: {reason}")]
    SchemaMismatch { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: gold answer {gold:?} is not among the options")]
    InvalidGold { path: PathBuf, line: usize, gold: String },
    #[error("corpus {0} is empty")]
    EmptyCorpus(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Consultation,
    Multichoice,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Consultation => "consultation",
            Source::Multichoice => "multichoice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub source: Source,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<char, String>>,
    /// Option letter for multichoice; the reference response for consultations.
    pub gold: String,
    pub reasoning: String,
}

impl QARecord {
    pub fn option_letters(&self) -> Vec<char> {
        self.options
            .as_ref()
            .map(|o| o.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn gold_letter(&self) -> Option<char> {
        let mut chars = self.gold.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if self.source == Source::Multichoice => Some(c),
            _ => None,
        }
    }

    /// `A. text` lines, one per option.
    pub fn options_block(&self) -> String {
        self.options
            .as_ref()
            .map(|o| {
                o.iter()
                    .map(|(k, v)| format!("{k}. {v}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default()
    }

    /// Question text followed by the options block, if any.
    pub fn prompt_question(&self) -> String {
        match &self.options {
            Some(_) => format!("{}\n\n{}", self.question, self.options_block()),
            None => self.question.clone(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        match self.source {
            Source::Multichoice => {
                let letters = self.option_letters();
                if letters.len() < 2 {
                    return Err("multichoice record needs at least two options".into());
                }
                match self.gold_letter() {
                    Some(g) if letters.contains(&g) => Ok(()),
                    _ => Err(format!("gold {:?} not among options", self.gold)),
                }
            }
            Source::Consultation => {
                if self.reasoning.trim().is_empty() {
                    Err("consultation record has an empty response".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Field names for consultation corpora (instruction/input/output layout).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsultationFields {
    pub question: String,
    pub response: String,
}

impl Default for ConsultationFields {
    fn default() -> Self {
        Self {
            question: "input".into(),
            response: "output".into(),
        }
    }
}

/// Field names for multiple-choice corpora.
///
/// Options come from `options` (object keyed by letter, or array) or from the
/// per-option keys. The gold answer is read from `gold_index` (integer,
/// offset by `gold_index_base`) or `gold_letter`. Records carrying a
/// `final_decision` yes/no/maybe field are mapped to options A/B/C.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultichoiceFields {
    pub question: String,
    pub options: String,
    pub option_keys: Vec<String>,
    pub gold_index: String,
    pub gold_index_base: i64,
    pub gold_letter: String,
    pub explanation: String,
}

impl Default for MultichoiceFields {
    fn default() -> Self {
        Self {
            question: "question".into(),
            options: "options".into(),
            option_keys: ["opa", "opb", "opc", "opd", "ope"].map(String::from).to_vec(),
            gold_index: "cop".into(),
            gold_index_base: 0,
            gold_letter: "answer".into(),
            explanation: "exp".into(),
        }
    }
}

const LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

/// Parsed object per 1-based line; per-line parse failures are kept.
type Lines = Vec<(usize, Result<Value, String>)>;

fn read_objects(path: &Path) -> Result<Lines, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::FileNotFound(path.to_path_buf()));
    }
    let raw = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if raw.trim_start().starts_with('[') {
        let arr: Vec<Value> = serde_json::from_str(&raw).map_err(|e| CorpusError::SchemaMismatch {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        return Ok(arr.into_iter().enumerate().map(|(i, v)| (i + 1, Ok(v))).collect());
    }
    Ok(raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(|e| e.to_string())))
        .collect())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}

fn record_id(stem: &str, line: usize) -> String {
    format!("{stem}-{line:06}")
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str).filter(|s| !s.trim().is_empty())
}

pub fn load_consultations(path: &Path, fields: &ConsultationFields) -> Result<Vec<QARecord>, CorpusError> {
    let stem = stem(path);
    let mismatch = |line, reason: String| CorpusError::SchemaMismatch {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (line, value) in read_objects(path)? {
        let value = value.map_err(|e| mismatch(line, e))?;
        let question = str_field(&value, &fields.question)
            .ok_or_else(|| mismatch(line, format!("missing patient message field {:?}", fields.question)))?;
        let response = str_field(&value, &fields.response)
            .ok_or_else(|| mismatch(line, format!("missing doctor response field {:?}", fields.response)))?;
        out.push(QARecord {
            id: record_id(&stem, line),
            source: Source::Consultation,
            question: question.trim().to_string(),
            options: None,
            gold: response.trim().to_string(),
            reasoning: response.trim().to_string(),
        });
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(out)
}

fn letter_of(s: &str) -> Option<char> {
    let t = s.trim().trim_matches(|c| c == '(' || c == ')' || c == '.');
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

fn parse_options(v: &Value, fields: &MultichoiceFields) -> Result<BTreeMap<char, String>, String> {
    let mut options = BTreeMap::new();
    match v.get(&fields.options) {
        Some(Value::Object(map)) => {
            for (k, text) in map {
                let letter = letter_of(k).ok_or_else(|| format!("option key {k:?} is not a letter"))?;
                let text = text.as_str().ok_or_else(|| format!("option {k:?} is not text"))?;
                options.insert(letter, text.trim().to_string());
            }
        }
        Some(Value::Array(items)) => {
            for (i, text) in items.iter().enumerate() {
                let letter = *LETTERS.get(i).ok_or("too many options")?;
                let text = text.as_str().ok_or_else(|| format!("option {i} is not text"))?;
                options.insert(letter, text.trim().to_string());
            }
        }
        Some(_) => return Err(format!("field {:?} must be an object or array", fields.options)),
        None => {
            for (i, key) in fields.option_keys.iter().enumerate() {
                if let Some(text) = str_field(v, key) {
                    options.insert(LETTERS[i], text.trim().to_string());
                }
            }
        }
    }
    if options.is_empty() {
        if let Some(decision) = str_field(v, "final_decision") {
            options = [('A', "yes"), ('B', "no"), ('C', "maybe")]
                .into_iter()
                .map(|(l, t)| (l, t.to_string()))
                .collect();
            let gold = match decision.trim().to_lowercase().as_str() {
                "yes" => 'A',
                "no" => 'B',
                "maybe" => 'C',
                other => return Err(format!("final_decision {other:?} is not yes/no/maybe")),
            };
            options.insert('#', gold.to_string());
        }
    }
    Ok(options)
}

pub fn load_multichoice(path: &Path, fields: &MultichoiceFields) -> Result<Vec<QARecord>, CorpusError> {
    let stem = stem(path);
    let mismatch = |line, reason: String| CorpusError::SchemaMismatch {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (line, value) in read_objects(path)? {
        let value = value.map_err(|e| mismatch(line, e))?;
        let question = str_field(&value, &fields.question)
            .ok_or_else(|| mismatch(line, format!("missing question field {:?}", fields.question)))?;
        let mut options = parse_options(&value, fields).map_err(|e| mismatch(line, e))?;
        let mapped_gold = options.remove(&'#');
        if options.len() < 2 {
            return Err(mismatch(line, "fewer than two options".into()));
        }
        let gold = if let Some(g) = mapped_gold {
            g
        } else if let Some(idx) = value.get(&fields.gold_index).and_then(Value::as_i64) {
            let pos = idx - fields.gold_index_base;
            match usize::try_from(pos).ok().and_then(|p| LETTERS.get(p)) {
                Some(l) => l.to_string(),
                None => {
                    return Err(CorpusError::InvalidGold {
                        path: path.to_path_buf(),
                        line,
                        gold: idx.to_string(),
                    })
                }
            }
        } else if let Some(letter) = str_field(&value, &fields.gold_letter) {
            match letter_of(letter) {
                Some(l) => l.to_string(),
                None => {
                    return Err(CorpusError::InvalidGold {
                        path: path.to_path_buf(),
                        line,
                        gold: letter.to_string(),
                    })
                }
            }
        } else {
            return Err(mismatch(line, "missing gold answer".into()));
        };
        let gold_char = gold.chars().next().unwrap();
        if !options.contains_key(&gold_char) {
            return Err(CorpusError::InvalidGold {
                path: path.to_path_buf(),
                line,
                gold,
            });
        }
        out.push(QARecord {
            id: record_id(&stem, line),
            source: Source::Multichoice,
            question: question.trim().to_string(),
            options: Some(options),
            gold,
            reasoning: str_field(&value, &fields.explanation).unwrap_or("").trim().to_string(),
        });
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessPolicy {
    pub min_sentences: usize,
    pub min_chars: usize,
    pub relevance: RelevanceMode,
    /// Distinct medical keywords the heuristic screen requires.
    pub min_keyword_hits: usize,
}

impl Default for PreprocessPolicy {
    fn default() -> Self {
        Self {
            min_sentences: 3,
            min_chars: 200,
            relevance: RelevanceMode::Heuristic,
            min_keyword_hits: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub discarded_short: usize,
    pub discarded_irrelevant: usize,
}

const MEDICAL_KEYWORDS: &[&str] = &[
    "symptom", "diagnos", "treat", "therap", "medic", "drug", "dose", "mg", "infection", "pain",
    "fever", "blood", "pressure", "disease", "syndrome", "disorder", "test", "scan", "x-ray",
    "ultrasound", "mri", "ecg", "antibiotic", "surgery", "patient", "doctor", "physician",
    "clinic", "hospital", "tablet", "prescri", "chronic", "acute", "inflammation", "allerg",
    "virus", "viral", "bacteria", "tumor", "cancer", "diabet", "hypertension", "cardi", "liver",
    "kidney", "lung", "stomach", "nerve", "muscle", "bone", "skin", "gland", "hormone", "cell",
    "artery", "vein", "heart", "brain", "enzyme", "receptor", "inhibit", "deficien", "lesion",
];

/// Number of distinct medical keyword stems occurring in `text`.
pub fn keyword_hits(text: &str) -> usize {
    let lower = text.to_lowercase();
    MEDICAL_KEYWORDS.iter().filter(|k| lower.contains(*k)).count()
}

fn is_short(r: &QARecord, policy: &PreprocessPolicy) -> bool {
    r.reasoning.chars().count() < policy.min_chars || split_sentences(&r.reasoning).len() < policy.min_sentences
}

/// Decides relevance for a batch of records, positionally.
pub trait RelevanceJudge: Sync {
    fn judge(&self, records: &[QARecord]) -> Vec<bool>;
}

pub struct HeuristicRelevance {
    pub min_keyword_hits: usize,
}

impl RelevanceJudge for HeuristicRelevance {
    fn judge(&self, records: &[QARecord]) -> Vec<bool> {
        crate::par::map(records, |r| keyword_hits(&r.reasoning) >= self.min_keyword_hits)
    }
}

/// Yes/no relevance classifier through the gateway. Records whose call fails
/// or whose reply is neither yes nor no fall back to the keyword screen.
pub struct LlmRelevance<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptCatalog,
    pub fallback: HeuristicRelevance,
}

pub const TASK_RELEVANCE: &str = "relevance";

impl RelevanceJudge for LlmRelevance<'_> {
    fn judge(&self, records: &[QARecord]) -> Vec<bool> {
        let reqs: Vec<ChatRequest> = records
            .iter()
            .map(|r| {
                let user = self
                    .prompts
                    .render(prompts::RELEVANCE, &[("question", &r.question), ("response", &r.reasoning)])
                    .unwrap_or_else(|_| format!("{}\n\n{}\n\nyes or no?", r.question, r.reasoning));
                ChatRequest::prompt(
                    format!("{TASK_RELEVANCE}|{}", r.id),
                    Some(self.prompts.system()),
                    user,
                    GenerationParams::with_temperature(STABLE_TEMPERATURE),
                )
            })
            .collect();
        let replies = self.gateway.complete_many(&reqs);
        let heuristic = self.fallback.judge(records);
        replies
            .into_iter()
            .zip(heuristic)
            .map(|(reply, fallback)| match reply.ok().and_then(|r| parse_yes_no(&r.content)) {
                Some(v) => v,
                None => fallback,
            })
            .collect()
    }
}

/// First word of a reply interpreted as yes/no.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let first = text
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" | "y" | "true" => Some(true),
        "no" | "n" | "false" => Some(false),
        _ => None,
    }
}

/// Drops records with short reasoning, then those judged irrelevant.
/// Kept records are returned sorted by id.
pub fn preprocess(
    records: Vec<QARecord>,
    policy: &PreprocessPolicy,
    judge: &dyn RelevanceJudge,
) -> (Vec<QARecord>, PreprocessReport) {
    let input_count = records.len();
    let short_flags = crate::par::map(&records, |r| is_short(r, policy));
    let (short, long): (Vec<_>, Vec<_>) = records.into_iter().zip(short_flags).partition(|(_, s)| *s);
    let long: Vec<QARecord> = long.into_iter().map(|(r, _)| r).collect();
    let relevant = judge.judge(&long);
    let mut kept: Vec<QARecord> = Vec::with_capacity(long.len());
    let mut irrelevant = 0;
    for (r, ok) in long.into_iter().zip(relevant) {
        if ok {
            kept.push(r);
        } else {
            irrelevant += 1;
        }
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    let report = PreprocessReport {
        input_count,
        kept_count: kept.len(),
        discarded_short: short.len(),
        discarded_irrelevant: irrelevant,
    };
    (kept, report)
}

/// Preprocess with the policy's default judge (keyword screen).
pub fn preprocess_heuristic(records: Vec<QARecord>, policy: &PreprocessPolicy) -> (Vec<QARecord>, PreprocessReport) {
    let judge = HeuristicRelevance {
        min_keyword_hits: policy.min_keyword_hits,
    };
    preprocess(records, policy, &judge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn consultations_map_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "chat.jsonl",
            "{\"instruction\":\"x\",\"input\":\"I have a cough\",\"output\":\"Take rest.\"}\n\n{\"input\":\"q2\",\"output\":\"r2\"}\n{\"input\":\"q3\",\"output\":\"r3\"}\n",
        );
        let recs = load_consultations(&p, &ConsultationFields::default()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.source == Source::Consultation));
        assert_eq!(recs[0].id, "chat-000001");
        assert_eq!(recs[1].id, "chat-000003");
        assert_eq!(recs[0].question, "I have a cough");
        assert_eq!(recs[0].reasoning, "Take rest.");
    }

    #[test]
    fn consultation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"input\":\"a\",\"output\":\"b\"}\n{\"input\":\"q\"}\n");
        match load_consultations(&p, &ConsultationFields::default()) {
            Err(CorpusError::SchemaMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "e.jsonl", "");
        assert!(matches!(
            load_consultations(&p, &ConsultationFields::default()),
            Err(CorpusError::EmptyCorpus(_))
        ));
        assert!(matches!(
            load_consultations(&dir.path().join("missing.jsonl"), &ConsultationFields::default()),
            Err(CorpusError::FileNotFound(_))
        ));
    }

    #[test]
    fn multichoice_gold_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "mc.json",
            r#"[{"question":"q","opa":"w","opb":"x","opc":"y","opd":"z","cop":2},
                {"question":"q2","options":{"a":"1","b":"2"},"answer":"b"},
                {"question":"q3","options":["1","2","3"],"answer":"(C)"},
                {"question":"q4","final_decision":"maybe"}]"#,
        );
        let recs = load_multichoice(&p, &MultichoiceFields::default()).unwrap();
        assert_eq!(recs[0].gold, "C");
        assert_eq!(recs[0].option_letters(), vec!['A', 'B', 'C', 'D']);
        assert_eq!(recs[1].gold, "B");
        assert_eq!(recs[2].gold, "C");
        assert_eq!(recs[3].gold, "C");
        assert_eq!(recs[3].options.as_ref().unwrap()[&'A'], "yes");
        assert!(recs.iter().all(|r| r.check().is_ok()));
    }

    #[test]
    fn multichoice_invalid_gold() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "mc.jsonl",
            r#"{"question":"q","opa":"w","opb":"x","opc":"y","opd":"z","answer":"E"}"#,
        );
        assert!(matches!(
            load_multichoice(&p, &MultichoiceFields::default()),
            Err(CorpusError::InvalidGold { .. })
        ));
    }

    #[test]
    fn multichoice_cardinality() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..1000)
            .map(|i| format!("{{\"question\":\"q{i}\",\"opa\":\"a\",\"opb\":\"b\",\"opc\":\"c\",\"opd\":\"d\",\"cop\":{}}}\n", i % 4))
            .collect();
        let p = write(dir.path(), "mc.jsonl", &body);
        let recs = load_multichoice(&p, &MultichoiceFields::default()).unwrap();
        assert_eq!(recs.len(), 1000);
        let ids: std::collections::HashSet<_> = recs.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 1000);
    }

    fn rec(id: &str, reasoning: &str) -> QARecord {
        QARecord {
            id: id.into(),
            source: Source::Consultation,
            question: "q".into(),
            options: None,
            gold: reasoning.into(),
            reasoning: reasoning.into(),
        }
    }

    const LONG: &str = "Your symptoms suggest a bacterial infection of the middle ear. \
        I recommend a course of amoxicillin for seven days at the usual dose. \
        If the fever persists beyond three days, please see a doctor for an examination. \
        Paracetamol can help with the pain in the meantime.";

    #[test]
    fn preprocess_accounting() {
        let mut records: Vec<QARecord> = (0..7).map(|i| rec(&format!("r{i}"), LONG)).collect();
        records.push(rec("s1", "Take rest."));
        records.push(rec("s2", "Drink water. Sleep well."));
        let greeting = "Hello and welcome. Thank you for reaching out to us today, it is always a pleasure to hear from you. \
            I hope that you are having a wonderful and relaxing week so far. \
            Please do not hesitate to write again whenever you like, we are always happy to chat.";
        records.push(rec("g1", greeting));
        let (kept, report) = preprocess_heuristic(records, &PreprocessPolicy::default());
        assert_eq!(
            report,
            PreprocessReport {
                input_count: 10,
                kept_count: 7,
                discarded_short: 2,
                discarded_irrelevant: 1
            }
        );
        assert_eq!(kept.len(), 7);
    }

    #[test]
    fn llm_relevance_scripted_no() {
        use crate::gateway::{script_mock, RetryPolicy, ScriptRule};
        use std::sync::Arc;
        let gw = Gateway::new(
            Arc::new(script_mock(vec![ScriptRule::new("reply with a single word", ["no"])], 1)),
            1,
            RetryPolicy::default(),
        );
        let prompts = PromptCatalog::default();
        let judge = LlmRelevance {
            gateway: &gw,
            prompts: &prompts,
            fallback: HeuristicRelevance { min_keyword_hits: 2 },
        };
        let (kept, report) = preprocess(vec![rec("a", LONG)], &PreprocessPolicy::default(), &judge);
        assert!(kept.is_empty());
        assert_eq!(report.discarded_irrelevant, 1);
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no("  no, because"), Some(false));
        assert_eq!(parse_yes_no("maybe"), None);
    }
}
