//! Training-file emission: one chat-format JSONL file per ablation mode, the
//! special-token manifest, and dataset statistics.
//!
//! Every emitted assistant message is parsed back under its mode's grammar
//! before it is written.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QARecord, Source};
use crate::gateway::{Message, Role};
use crate::pinpoint::{consultation_trajectory, Pathway};
use crate::reflection::ReflectionDraft;
use crate::text::split_sentences;
use crate::trajectory::{
    assemble_multi, count_reflection_blocks, parse_projected, project_ablation, AblationMode, Correction,
    ParseError, ReflectiveTrajectory, SpecialTokens, Trajectory, TrajectoryError,
};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("record {id}: {source}")]
    Serialization {
        id: String,
        #[source]
        source: TrajectoryError,
    },
    #[error("record {id} ({mode}): emitted text does not parse back: {source}")]
    RoundTrip {
        id: String,
        mode: AblationMode,
        #[source]
        source: ParseError,
    },
    #[error("record {0} not found")]
    MissingRecord(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EmitError {
    EmitError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitParams {
    pub modes: Vec<AblationMode>,
    /// Abort on the first example that fails to serialize or parse back.
    /// When off, such examples are skipped and counted.
    pub strict: bool,
    pub tokens: SpecialTokens,
}

impl Default for EmitParams {
    fn default() -> Self {
        Self {
            modes: AblationMode::ALL.to_vec(),
            strict: true,
            tokens: SpecialTokens::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub pathway: Pathway,
    pub pinpoints: Vec<String>,
    pub reflections: usize,
}

/// One line of a training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub source: Source,
    pub mode: AblationMode,
    pub messages: Vec<Message>,
    pub meta: ExampleMeta,
}

impl TrainingExample {
    pub fn assistant(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Reflective trajectory for one record from its retained drafts.
///
/// Word-level drafts are merged into one trajectory, one correction per
/// step, keeping the first draft for each step. Sentence-level drafts come
/// from different sampled answers, so only the first is used.
pub fn merge_record(drafts: &[&ReflectionDraft]) -> Result<(ReflectiveTrajectory, Vec<String>), TrajectoryError> {
    let first = drafts.first().ok_or(TrajectoryError::EmptySteps)?;
    if first.pathway() == Pathway::Rg1 || drafts.len() == 1 {
        return Ok((first.reflective.clone(), vec![first.id.clone()]));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut corrections = Vec::new();
    let mut ids = Vec::new();
    for d in drafts.iter().filter(|d| d.pathway() == Pathway::Rg2) {
        if seen.insert(d.pinpoint.step_index) {
            corrections.push(Correction {
                step_index: d.pinpoint.step_index,
                erroneous: d.pinpoint.erroneous_text.clone(),
                reflection: d.reflection.clone(),
                corrected: d.corrected.clone(),
            });
            ids.push(d.id.clone());
        }
    }
    Ok((assemble_multi(&first.erroneous, &corrections)?, ids))
}

/// Reference trajectory of a record, used for `original` rows.
pub fn reference_trajectory(record: &QARecord) -> Option<Trajectory> {
    match record.source {
        Source::Consultation => consultation_trajectory(record),
        Source::Multichoice => {
            let steps = split_sentences(&record.reasoning);
            let answer = format!("Therefore, the answer is ({}).", record.gold_letter()?);
            Trajectory::new(&record.id, &steps, answer).ok()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmitReport {
    pub mode: Option<AblationMode>,
    pub examples: usize,
    pub skipped: BTreeMap<String, String>,
}

/// Builds the examples for one mode, sorted by record id.
pub fn build_examples<'r, L>(
    drafts: &[ReflectionDraft],
    lookup: L,
    mode: AblationMode,
    params: &EmitParams,
) -> Result<(Vec<TrainingExample>, EmitReport), EmitError>
where
    L: Fn(&str) -> Option<&'r QARecord>,
{
    let mut groups: BTreeMap<&str, Vec<&ReflectionDraft>> = BTreeMap::new();
    for d in drafts {
        groups.entry(d.record_id.as_str()).or_default().push(d);
    }
    let mut report = EmitReport {
        mode: Some(mode),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(groups.len());
    for (id, group) in groups {
        match build_one(id, &group, &lookup, mode, &params.tokens) {
            Ok(ex) => out.push(ex),
            Err(e) if params.strict => return Err(e),
            Err(e) => {
                report.skipped.insert(id.to_string(), e.to_string());
            }
        }
    }
    report.examples = out.len();
    Ok((out, report))
}

fn build_one<'r, L>(
    id: &str,
    group: &[&ReflectionDraft],
    lookup: &L,
    mode: AblationMode,
    tokens: &SpecialTokens,
) -> Result<TrainingExample, EmitError>
where
    L: Fn(&str) -> Option<&'r QARecord>,
{
    let record = lookup(id).ok_or_else(|| EmitError::MissingRecord(id.to_string()))?;
    let ser = |source| EmitError::Serialization {
        id: id.to_string(),
        source,
    };
    let (merged, pinpoints) = merge_record(group).map_err(ser)?;
    let text = if mode == AblationMode::Original {
        reference_trajectory(record)
            .ok_or(TrajectoryError::EmptySteps)
            .and_then(|t| t.render_checked(tokens))
            .map_err(ser)?
    } else {
        project_ablation(&merged, mode).render(tokens).map_err(ser)?
    };
    parse_projected(&text, tokens, mode).map_err(|source| EmitError::RoundTrip {
        id: id.to_string(),
        mode,
        source,
    })?;
    Ok(TrainingExample {
        id: id.to_string(),
        source: record.source,
        mode,
        messages: vec![Message::user(record.prompt_question()), Message::assistant(text)],
        meta: ExampleMeta {
            pathway: group[0].pathway(),
            reflections: merged.reflection_count(),
            pinpoints,
        },
    })
}

pub fn training_file_name(mode: AblationMode) -> String {
    format!("train_{mode}.jsonl")
}

pub const TOKEN_MANIFEST: &str = "special_tokens.json";

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EmitError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EmitError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenManifest {
    pub special_tokens: Vec<String>,
}

/// Writes the token manifest: the four tokens in canonical order.
pub fn emit_token_manifest(dir: &Path, tokens: &SpecialTokens) -> Result<PathBuf, EmitError> {
    tokens.validate().map_err(|source| EmitError::Serialization {
        id: TOKEN_MANIFEST.into(),
        source,
    })?;
    let path = dir.join(TOKEN_MANIFEST);
    let manifest = TokenManifest {
        special_tokens: tokens.as_array().iter().map(|t| t.to_string()).collect(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    std::fs::write(&path, format!("{text}\n")).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Writes one training file per mode plus the token manifest.
pub fn emit_all<'r, L>(
    drafts: &[ReflectionDraft],
    lookup: L,
    params: &EmitParams,
    out_dir: &Path,
) -> Result<Vec<EmitReport>, EmitError>
where
    L: Fn(&str) -> Option<&'r QARecord> + Copy,
{
    let mut reports = Vec::with_capacity(params.modes.len());
    for &mode in &params.modes {
        let (examples, report) = build_examples(drafts, lookup, mode, params)?;
        write_jsonl(&out_dir.join(training_file_name(mode)), &examples)?;
        reports.push(report);
    }
    emit_token_manifest(out_dir, &params.tokens)?;
    Ok(reports)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub by_source: BTreeMap<String, usize>,
    pub with_reflection: usize,
    pub reflection_fraction: Option<f64>,
    /// Mean reflection blocks per example, over all examples.
    pub mean_blocks: Option<f64>,
    pub blocks_histogram: BTreeMap<usize, usize>,
    /// Examples whose special tokens do not balance; counted as zero blocks.
    pub unbalanced: usize,
    pub mean_chars: Option<f64>,
    pub median_chars: Option<f64>,
}

pub fn median(values: &mut [usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

pub fn compute_stats(examples: &[TrainingExample], tokens: &SpecialTokens) -> DatasetStats {
    let mut s = DatasetStats::default();
    let mut lengths = Vec::with_capacity(examples.len());
    let mut blocks_total = 0usize;
    for ex in examples {
        s.examples += 1;
        *s.by_source.entry(ex.source.as_str().to_string()).or_default() += 1;
        let text = ex.assistant();
        lengths.push(text.chars().count());
        let blocks = count_reflection_blocks(text, tokens).unwrap_or_else(|| {
            s.unbalanced += 1;
            0
        });
        blocks_total += blocks;
        if blocks > 0 {
            s.with_reflection += 1;
        }
        *s.blocks_histogram.entry(blocks).or_default() += 1;
    }
    if s.examples > 0 {
        s.reflection_fraction = Some(s.with_reflection as f64 / s.examples as f64);
        s.mean_blocks = Some(blocks_total as f64 / s.examples as f64);
        s.mean_chars = Some(lengths.iter().sum::<usize>() as f64 / s.examples as f64);
    }
    s.median_chars = median(&mut lengths);
    s
}

pub fn stats_for_file(path: &Path, tokens: &SpecialTokens) -> Result<DatasetStats, EmitError> {
    Ok(compute_stats(&read_jsonl::<TrainingExample>(path)?, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_odd_empty() {
        assert_eq!(median(&mut [3, 1, 2]), Some(2.0));
        assert_eq!(median(&mut [4, 1, 2, 3]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = emit_token_manifest(dir.path(), &SpecialTokens::default()).unwrap();
        let m: TokenManifest = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(m.special_tokens, ["<Think>", "</Think>", "<Modified>", "</Modified>"]);
    }

    #[test]
    fn multichoice_reference() {
        let r = QARecord {
            id: "m".into(),
            source: Source::Multichoice,
            question: "Q?".into(),
            options: Some([('A', "x".to_string()), ('B', "y".to_string())].into_iter().collect()),
            gold: "B".into(),
            reasoning: "First point. Second point.".into(),
        };
        assert_eq!(
            reference_trajectory(&r).unwrap().render(),
            "First point.\nSecond point.\nTherefore, the answer is (B)."
        );
    }
}
