//! Reflective trajectory model and its special-token text format.
//!
//! A plain [`Trajectory`] is an ordered list of reasoning steps followed by a
//! final answer. A [`ReflectiveTrajectory`] interleaves erroneous steps with a
//! reflection block (self-posed question and self-answer) and the corrected
//! step, following the grammar
//!
//! ```text
//! original* (erroneous reflection corrected original*)+
//! ```
//!
//! Serialized, each triple occupies one line:
//!
//! ```text
//! <erroneous> <Think>Question: ...
//! Answer: ...</Think> <Modified>corrected</Modified>
//! ```
//!
//! Other steps take one line each and the final answer is the last line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{leaks_question, normalize_ws};

pub const QUESTION_LABEL: &str = "Question:";
pub const ANSWER_LABEL: &str = "Answer:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("pinpoint index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("corrected text equals erroneous text at step {index}")]
    DegenerateCorrection { index: usize },
    #[error("more than one correction targets step {index}")]
    DuplicatePinpoint { index: usize },
    #[error("empty {what}")]
    EmptyText { what: &'static str },
    #[error("trajectory has no steps")]
    EmptySteps,
    #[error("text of {location} contains special token {token:?}")]
    TokenCollision { token: String, location: String },
    #[error("invalid special tokens: {0}")]
    InvalidTokens(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unbalanced special tokens at byte {offset}: {detail}")]
    UnbalancedTokens { offset: usize, detail: String },
    #[error("grammar violation at byte {offset}: {detail}")]
    GrammarViolation { offset: usize, detail: String },
    #[error("empty {what} at byte {offset}")]
    EmptySegment { offset: usize, what: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub think_open: String,
    pub think_close: String,
    pub modified_open: String,
    pub modified_close: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            think_open: "<Think>".into(),
            think_close: "</Think>".into(),
            modified_open: "<Modified>".into(),
            modified_close: "</Modified>".into(),
        }
    }
}

impl SpecialTokens {
    /// Canonical order: think open, think close, modified open, modified close.
    pub fn as_array(&self) -> [&str; 4] {
        [
            &self.think_open,
            &self.think_close,
            &self.modified_open,
            &self.modified_close,
        ]
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let all = self.as_array();
        for (i, a) in all.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(TrajectoryError::InvalidTokens(format!("token #{i} is empty")));
            }
            if a.chars().any(char::is_whitespace) {
                return Err(TrajectoryError::InvalidTokens(format!(
                    "token {a:?} contains whitespace"
                )));
            }
            for b in &all[i + 1..] {
                if a == b {
                    return Err(TrajectoryError::InvalidTokens(format!("duplicate token {a:?}")));
                }
            }
        }
        Ok(())
    }

    /// First special token contained in `text`, if any.
    pub fn find_in<'a>(&'a self, text: &str) -> Option<&'a str> {
        self.as_array().into_iter().find(|t| text.contains(t))
    }

    pub fn count_in(&self, text: &str) -> usize {
        self.as_array().iter().map(|t| text.matches(t).count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Original,
    Erroneous,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub text: String,
    pub kind: StepKind,
}

impl Step {
    pub fn new(index: usize, text: impl AsRef<str>, kind: StepKind) -> Result<Self, TrajectoryError> {
        let text = normalize_ws(text.as_ref());
        if text.is_empty() {
            return Err(TrajectoryError::EmptyText { what: "step" });
        }
        Ok(Self { index, text, kind })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub steps: Vec<Step>,
    pub answer: String,
}

impl Trajectory {
    /// Builds a trajectory of original steps.
    pub fn new<S: AsRef<str>>(
        question_id: impl Into<String>,
        steps: &[S],
        answer: impl AsRef<str>,
    ) -> Result<Self, TrajectoryError> {
        if steps.is_empty() {
            return Err(TrajectoryError::EmptySteps);
        }
        let steps = steps
            .iter()
            .enumerate()
            .map(|(i, s)| Step::new(i, s, StepKind::Original))
            .collect::<Result<Vec<_>, _>>()?;
        let answer = normalize_ws(answer.as_ref());
        if answer.is_empty() {
            return Err(TrajectoryError::EmptyText { what: "answer" });
        }
        Ok(Self {
            question_id: question_id.into(),
            steps,
            answer,
        })
    }

    /// A trajectory is erroneous when any step is marked erroneous.
    pub fn is_erroneous(&self) -> bool {
        self.steps.iter().any(|s| s.kind == StepKind::Erroneous)
    }

    /// Returns a copy with step `index` replaced by `text` and marked erroneous.
    pub fn with_error(&self, index: usize, text: &str) -> Result<Self, TrajectoryError> {
        if index >= self.steps.len() {
            return Err(TrajectoryError::IndexOutOfRange {
                index,
                len: self.steps.len(),
            });
        }
        let mut out = self.clone();
        out.steps[index] = Step::new(index, text, StepKind::Erroneous)?;
        Ok(out)
    }

    /// One step per line followed by the answer line.
    pub fn render(&self) -> String {
        let mut lines: Vec<String> = self.steps.iter().map(|s| normalize_ws(&s.text)).collect();
        lines.push(normalize_ws(&self.answer));
        lines.join("\n")
    }

    pub fn render_checked(&self, tokens: &SpecialTokens) -> Result<String, TrajectoryError> {
        for s in &self.steps {
            check_collision(tokens, &s.text, || format!("step {}", s.index))?;
        }
        check_collision(tokens, &self.answer, || "answer".to_string())?;
        Ok(self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionPair {
    pub question: String,
    pub answer: String,
    pub pinpoint_index: usize,
}

/// Reflection content as it appears inside a trajectory. Ablated variants
/// drop one of the two parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionBlock {
    pub question: Option<String>,
    pub answer: Option<String>,
}

impl From<&ReflectionPair> for ReflectionBlock {
    fn from(p: &ReflectionPair) -> Self {
        Self {
            question: Some(normalize_ws(&p.question)),
            answer: Some(normalize_ws(&p.answer)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Step(Step),
    Reflection(ReflectionBlock),
}

impl Segment {
    fn step_kind(&self) -> Option<StepKind> {
        match self {
            Segment::Step(s) => Some(s.kind),
            Segment::Reflection(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectiveTrajectory {
    pub question_id: String,
    pub segments: Vec<Segment>,
    pub answer: String,
}

impl ReflectiveTrajectory {
    pub fn reflection_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Reflection(_)))
            .count()
    }

    /// Whitespace-normalized copy with step indices renumbered in order.
    pub fn normalized(&self) -> Self {
        let mut next = 0;
        let segments = self
            .segments
            .iter()
            .map(|seg| match seg {
                Segment::Step(s) => {
                    let step = Step {
                        index: next,
                        text: normalize_ws(&s.text),
                        kind: s.kind,
                    };
                    next += 1;
                    Segment::Step(step)
                }
                Segment::Reflection(r) => Segment::Reflection(ReflectionBlock {
                    question: r.question.as_deref().map(normalize_ws),
                    answer: r.answer.as_deref().map(normalize_ws),
                }),
            })
            .collect();
        Self {
            question_id: self.question_id.clone(),
            segments,
            answer: normalize_ws(&self.answer),
        }
    }

    /// Structural equality over segments and answer, ignoring whitespace
    /// differences and the question id.
    pub fn same_structure(&self, other: &Self) -> bool {
        let a = self.normalized();
        let b = other.normalized();
        a.segments == b.segments && a.answer == b.answer
    }
}

/// One correction applied by [`assemble_multi`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correction {
    pub step_index: usize,
    pub erroneous: String,
    pub reflection: ReflectionPair,
    pub corrected: String,
}

/// Inserts a single (erroneous, reflection, corrected) triple at `pinpoint_index`.
pub fn assemble_reflective(
    base: &Trajectory,
    pinpoint_index: usize,
    erroneous_text: &str,
    reflection: &ReflectionPair,
    corrected_text: &str,
) -> Result<ReflectiveTrajectory, TrajectoryError> {
    assemble_multi(
        base,
        &[Correction {
            step_index: pinpoint_index,
            erroneous: erroneous_text.to_string(),
            reflection: reflection.clone(),
            corrected: corrected_text.to_string(),
        }],
    )
}

/// Inserts one triple per correction. Steps without a correction are kept
/// as original steps, unchanged.
pub fn assemble_multi(
    base: &Trajectory,
    corrections: &[Correction],
) -> Result<ReflectiveTrajectory, TrajectoryError> {
    if base.steps.is_empty() {
        return Err(TrajectoryError::EmptySteps);
    }
    if corrections.is_empty() {
        return Err(TrajectoryError::EmptyText { what: "correction list" });
    }
    let len = base.steps.len();
    let mut by_index: Vec<Option<&Correction>> = vec![None; len];
    for c in corrections {
        if c.step_index >= len {
            return Err(TrajectoryError::IndexOutOfRange {
                index: c.step_index,
                len,
            });
        }
        if by_index[c.step_index].is_some() {
            return Err(TrajectoryError::DuplicatePinpoint { index: c.step_index });
        }
        if normalize_ws(&c.erroneous) == normalize_ws(&c.corrected) {
            return Err(TrajectoryError::DegenerateCorrection { index: c.step_index });
        }
        if normalize_ws(&c.reflection.question).is_empty() {
            return Err(TrajectoryError::EmptyText { what: "reflection question" });
        }
        if normalize_ws(&c.reflection.answer).is_empty() {
            return Err(TrajectoryError::EmptyText { what: "reflection answer" });
        }
        by_index[c.step_index] = Some(c);
    }

    let mut segments = Vec::with_capacity(len + 3 * corrections.len());
    let mut next = 0;
    let mut push_step = |segments: &mut Vec<Segment>, text: &str, kind| -> Result<(), TrajectoryError> {
        segments.push(Segment::Step(Step::new(next, text, kind)?));
        next += 1;
        Ok(())
    };
    for (i, step) in base.steps.iter().enumerate() {
        match by_index[i] {
            Some(c) => {
                push_step(&mut segments, &c.erroneous, StepKind::Erroneous)?;
                segments.push(Segment::Reflection(ReflectionBlock::from(&c.reflection)));
                push_step(&mut segments, &c.corrected, StepKind::Corrected)?;
            }
            None => push_step(&mut segments, &step.text, StepKind::Original)?,
        }
    }
    let answer = normalize_ws(&base.answer);
    if answer.is_empty() {
        return Err(TrajectoryError::EmptyText { what: "answer" });
    }
    Ok(ReflectiveTrajectory {
        question_id: base.question_id.clone(),
        segments,
        answer,
    })
}

fn check_collision(
    tokens: &SpecialTokens,
    text: &str,
    location: impl FnOnce() -> String,
) -> Result<(), TrajectoryError> {
    match tokens.find_in(text) {
        Some(t) => Err(TrajectoryError::TokenCollision {
            token: t.to_string(),
            location: location(),
        }),
        None => Ok(()),
    }
}

fn render_block(block: &ReflectionBlock) -> String {
    let mut lines = Vec::with_capacity(2);
    if let Some(q) = &block.question {
        lines.push(format!("{QUESTION_LABEL} {}", normalize_ws(q)));
    }
    if let Some(a) = &block.answer {
        lines.push(format!("{ANSWER_LABEL} {}", normalize_ws(a)));
    }
    lines.join("\n")
}

/// Renders a reflective trajectory in the special-token training format.
///
/// A corrected step directly after a reflection block is wrapped in the
/// modified tokens; every other step is a plain line. Trajectories with no
/// reflection blocks therefore render without any special tokens.
pub fn serialize_training_text(
    t: &ReflectiveTrajectory,
    tokens: &SpecialTokens,
) -> Result<String, TrajectoryError> {
    let mut lines: Vec<String> = Vec::new();
    let mut prev_reflection = false;
    for (i, seg) in t.segments.iter().enumerate() {
        match seg {
            Segment::Step(s) => {
                check_collision(tokens, &s.text, || format!("segment {i}"))?;
                let text = normalize_ws(&s.text);
                if s.kind == StepKind::Corrected && prev_reflection {
                    let line = lines.last_mut().expect("reflection always follows a line");
                    line.push(' ');
                    line.push_str(&tokens.modified_open);
                    line.push_str(&text);
                    line.push_str(&tokens.modified_close);
                } else {
                    lines.push(text);
                }
                prev_reflection = false;
            }
            Segment::Reflection(block) => {
                for part in block.question.iter().chain(block.answer.iter()) {
                    check_collision(tokens, part, || format!("segment {i}"))?;
                }
                let rendered = format!("{}{}{}", tokens.think_open, render_block(block), tokens.think_close);
                match lines.last_mut() {
                    Some(line) => {
                        line.push(' ');
                        line.push_str(&rendered);
                    }
                    None => lines.push(rendered),
                }
                prev_reflection = true;
            }
        }
    }
    check_collision(tokens, &t.answer, || "answer".to_string())?;
    lines.push(normalize_ws(&t.answer));
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    ThinkOpen,
    ThinkClose,
    ModifiedOpen,
    ModifiedClose,
}

#[derive(Debug)]
enum Lexeme<'a> {
    Text(&'a str, usize),
    Marker(Marker, usize),
}

fn lex<'a>(s: &'a str, tokens: &SpecialTokens) -> Vec<Lexeme<'a>> {
    let table = [
        (tokens.think_open.as_str(), Marker::ThinkOpen),
        (tokens.think_close.as_str(), Marker::ThinkClose),
        (tokens.modified_open.as_str(), Marker::ModifiedOpen),
        (tokens.modified_close.as_str(), Marker::ModifiedClose),
    ];
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < s.len() {
        let rest = &s[pos..];
        // earliest match, longest on ties
        let hit = table
            .iter()
            .filter_map(|(lit, m)| rest.find(lit).map(|at| (at, lit.len(), *m)))
            .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        match hit {
            Some((at, len, marker)) => {
                if at > 0 {
                    out.push(Lexeme::Text(&rest[..at], pos));
                }
                out.push(Lexeme::Marker(marker, pos + at));
                pos += at + len;
            }
            None => {
                out.push(Lexeme::Text(rest, pos));
                break;
            }
        }
    }
    out
}

fn check_balance(lexemes: &[Lexeme<'_>]) -> Result<(), ParseError> {
    let mut open: Option<(Marker, usize)> = None;
    for lx in lexemes {
        if let Lexeme::Marker(m, at) = lx {
            match (m, open) {
                (Marker::ThinkOpen | Marker::ModifiedOpen, None) => open = Some((*m, *at)),
                (Marker::ThinkOpen | Marker::ModifiedOpen, Some(_)) => {
                    return Err(ParseError::UnbalancedTokens {
                        offset: *at,
                        detail: "nested opening token".into(),
                    })
                }
                (Marker::ThinkClose, Some((Marker::ThinkOpen, _)))
                | (Marker::ModifiedClose, Some((Marker::ModifiedOpen, _))) => open = None,
                (Marker::ThinkClose | Marker::ModifiedClose, _) => {
                    return Err(ParseError::UnbalancedTokens {
                        offset: *at,
                        detail: "closing token without matching opening token".into(),
                    })
                }
            }
        }
    }
    match open {
        Some((_, at)) => Err(ParseError::UnbalancedTokens {
            offset: at,
            detail: "opening token never closed".into(),
        }),
        None => Ok(()),
    }
}

/// Number of reflection blocks in `text`, or `None` when the special tokens
/// are not balanced.
pub fn count_reflection_blocks(text: &str, tokens: &SpecialTokens) -> Option<usize> {
    let lexemes = lex(text, tokens);
    check_balance(&lexemes).ok()?;
    Some(
        lexemes
            .iter()
            .filter(|l| matches!(l, Lexeme::Marker(Marker::ThinkOpen, _)))
            .count(),
    )
}

fn parse_block(inner: &str, offset: usize) -> Result<ReflectionBlock, ParseError> {
    let lines: Vec<&str> = inner.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(ParseError::EmptySegment {
            offset,
            what: "reflection block",
        });
    }
    let mut block = ReflectionBlock {
        question: None,
        answer: None,
    };
    for line in lines {
        let (slot, rest, what) = if let Some(rest) = line.strip_prefix(QUESTION_LABEL) {
            if block.answer.is_some() {
                return Err(ParseError::GrammarViolation {
                    offset,
                    detail: "question line after answer line".into(),
                });
            }
            (&mut block.question, rest, "reflection question")
        } else if let Some(rest) = line.strip_prefix(ANSWER_LABEL) {
            (&mut block.answer, rest, "reflection answer")
        } else {
            return Err(ParseError::GrammarViolation {
                offset,
                detail: format!("unlabelled line in reflection block: {line:?}"),
            });
        };
        if slot.is_some() {
            return Err(ParseError::GrammarViolation {
                offset,
                detail: format!("repeated {what} line"),
            });
        }
        let text = normalize_ws(rest);
        if text.is_empty() {
            return Err(ParseError::EmptySegment { offset, what });
        }
        *slot = Some(text);
    }
    Ok(block)
}

fn push_lines(segments: &mut Vec<Segment>, pending: &mut String) {
    for line in pending.lines() {
        let text = normalize_ws(line);
        if !text.is_empty() {
            segments.push(Segment::Step(Step {
                index: 0,
                text,
                kind: StepKind::Original,
            }));
        }
    }
    pending.clear();
}

/// Parses the special-token format into segments, checking token balance and
/// the local triple structure but not whether any triple exists or whether
/// reflection blocks are complete.
pub fn parse_segments(s: &str, tokens: &SpecialTokens) -> Result<ReflectiveTrajectory, ParseError> {
    let lexemes = lex(s, tokens);
    check_balance(&lexemes)?;

    let mut segments: Vec<Segment> = Vec::new();
    let mut pending = String::new();
    let mut it = lexemes.into_iter().peekable();
    while let Some(lx) = it.next() {
        match lx {
            Lexeme::Text(t, _) => pending.push_str(t),
            Lexeme::Marker(Marker::ThinkOpen, at) => {
                let (before, last) = match pending.rfind('\n') {
                    Some(nl) => (pending[..nl].to_string(), pending[nl + 1..].to_string()),
                    None => (String::new(), pending.clone()),
                };
                let erroneous = normalize_ws(&last);
                if erroneous.is_empty() {
                    return Err(ParseError::EmptySegment {
                        offset: at,
                        what: "erroneous step",
                    });
                }
                pending = before;
                push_lines(&mut segments, &mut pending);
                segments.push(Segment::Step(Step {
                    index: 0,
                    text: erroneous,
                    kind: StepKind::Erroneous,
                }));

                let inner = match it.next() {
                    Some(Lexeme::Text(t, _)) => {
                        it.next(); // closing marker, guaranteed by the balance check
                        t
                    }
                    _ => "",
                };
                segments.push(Segment::Reflection(parse_block(inner, at)?));

                if let Some(Lexeme::Text(t, _)) = it.peek() {
                    if t.trim().is_empty() {
                        it.next();
                    }
                }
                match it.next() {
                    Some(Lexeme::Marker(Marker::ModifiedOpen, mat)) => {
                        let inner = match it.next() {
                            Some(Lexeme::Text(t, _)) => {
                                it.next();
                                t
                            }
                            _ => "",
                        };
                        let corrected = normalize_ws(inner);
                        if corrected.is_empty() {
                            return Err(ParseError::EmptySegment {
                                offset: mat,
                                what: "corrected step",
                            });
                        }
                        segments.push(Segment::Step(Step {
                            index: 0,
                            text: corrected,
                            kind: StepKind::Corrected,
                        }));
                    }
                    Some(Lexeme::Text(_, off)) | Some(Lexeme::Marker(_, off)) => {
                        return Err(ParseError::GrammarViolation {
                            offset: off,
                            detail: "reflection block not directly followed by a modified block".into(),
                        })
                    }
                    None => {
                        return Err(ParseError::GrammarViolation {
                            offset: s.len(),
                            detail: "reflection block not followed by a modified block".into(),
                        })
                    }
                }
            }
            Lexeme::Marker(Marker::ModifiedOpen, at) => {
                return Err(ParseError::GrammarViolation {
                    offset: at,
                    detail: "modified block without preceding reflection block".into(),
                })
            }
            Lexeme::Marker(_, at) => {
                return Err(ParseError::UnbalancedTokens {
                    offset: at,
                    detail: "unexpected closing token".into(),
                })
            }
        }
    }

    // the last non-empty line is the final answer
    let mut answer = String::new();
    let mut lines: Vec<&str> = pending.lines().collect();
    while let Some(line) = lines.pop() {
        let text = normalize_ws(line);
        if !text.is_empty() {
            answer = text;
            break;
        }
    }
    if answer.is_empty() {
        return Err(ParseError::EmptySegment {
            offset: s.len(),
            what: "final answer",
        });
    }
    let mut rest = lines.join("\n");
    push_lines(&mut segments, &mut rest);

    let mut t = ReflectiveTrajectory {
        question_id: String::new(),
        segments,
        answer,
    };
    t = t.normalized();
    Ok(t)
}

/// Parses full-mode training text: at least one triple, and every reflection
/// block carries both a question and an answer.
pub fn parse_training_text(s: &str, tokens: &SpecialTokens) -> Result<ReflectiveTrajectory, ParseError> {
    parse_projected(s, tokens, AblationMode::Full)
}

/// Parses training text emitted under `mode` and checks the mode's grammar.
pub fn parse_projected(
    s: &str,
    tokens: &SpecialTokens,
    mode: AblationMode,
) -> Result<ReflectiveTrajectory, ParseError> {
    let t = parse_segments(s, tokens)?;
    let report = validate_as(&t, Grammar::for_mode(mode), None);
    match report.first() {
        None => Ok(t),
        Some(v) => Err(ParseError::GrammarViolation {
            offset: 0,
            detail: format!("{:?} at segment {:?}", v.kind, v.segment),
        }),
    }
}

/// Which segment orders are acceptable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grammar {
    /// Complete reflection blocks between erroneous and corrected steps.
    Full,
    /// Reflection blocks carry only the question.
    QuestionOnly,
    /// Reflection blocks carry only the answer.
    AnswerOnly,
    /// Erroneous step directly followed by the corrected step.
    DirectRetry,
    /// Original steps only.
    Plain,
}

impl Grammar {
    pub fn for_mode(mode: AblationMode) -> Self {
        match mode {
            AblationMode::Full => Grammar::Full,
            AblationMode::QuestionOnly => Grammar::QuestionOnly,
            AblationMode::AnswerOnly => Grammar::AnswerOnly,
            // no special tokens survive serialization, so parsed text is plain
            AblationMode::NoReflect | AblationMode::Original => Grammar::Plain,
        }
    }

    fn reflective(self) -> bool {
        matches!(self, Grammar::Full | Grammar::QuestionOnly | Grammar::AnswerOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyText,
    EmptyAnswer,
    DuplicateIndex,
    NoCorrectionTriple,
    ErroneousWithoutFollowup,
    ReflectionNotAfterErroneous,
    ReflectionNotBeforeCorrected,
    CorrectedWithoutPredecessor,
    IncompleteReflection,
    UnexpectedReflectionPart,
    UnexpectedSegment,
    DegenerateCorrection,
    QuestionLeak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Segment position, or `None` for trajectory-level violations.
    pub segment: Option<usize>,
    pub kind: ViolationKind,
}

/// Full-grammar validation. An empty report means the trajectory is valid.
///
/// When `question` is given, reflection answers are also checked for
/// verbatim copies of it.
pub fn validate(t: &ReflectiveTrajectory, question: Option<&str>) -> Vec<Violation> {
    validate_as(t, Grammar::Full, question)
}

pub fn validate_as(t: &ReflectiveTrajectory, grammar: Grammar, question: Option<&str>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |segment: Option<usize>, kind| out.push(Violation { segment, kind });
    let segs = &t.segments;
    let kind_at = |i: Option<usize>| i.and_then(|i| segs.get(i)).map(|s| s.step_kind());
    let mut seen = std::collections::HashSet::new();
    let mut triples = 0;

    for (i, seg) in segs.iter().enumerate() {
        let prev = kind_at(i.checked_sub(1));
        let next = kind_at(Some(i + 1));
        match seg {
            Segment::Step(s) => {
                if normalize_ws(&s.text).is_empty() {
                    flag(Some(i), ViolationKind::EmptyText);
                }
                if !seen.insert(s.index) {
                    flag(Some(i), ViolationKind::DuplicateIndex);
                }
                match (s.kind, grammar) {
                    (StepKind::Original, _) => {}
                    (_, Grammar::Plain) => flag(Some(i), ViolationKind::UnexpectedSegment),
                    (StepKind::Erroneous, Grammar::DirectRetry) => {
                        if next != Some(Some(StepKind::Corrected)) {
                            flag(Some(i), ViolationKind::ErroneousWithoutFollowup);
                        }
                    }
                    (StepKind::Erroneous, _) => {
                        if next != Some(None) {
                            flag(Some(i), ViolationKind::ErroneousWithoutFollowup);
                        }
                    }
                    (StepKind::Corrected, Grammar::DirectRetry) => {
                        if prev != Some(Some(StepKind::Erroneous)) {
                            flag(Some(i), ViolationKind::CorrectedWithoutPredecessor);
                        } else {
                            triples += 1;
                            if let Some(Segment::Step(e)) = segs.get(i - 1) {
                                if normalize_ws(&e.text) == normalize_ws(&s.text) {
                                    flag(Some(i), ViolationKind::DegenerateCorrection);
                                }
                            }
                        }
                    }
                    (StepKind::Corrected, _) => {
                        if prev != Some(None) {
                            flag(Some(i), ViolationKind::CorrectedWithoutPredecessor);
                        }
                    }
                }
            }
            Segment::Reflection(block) => {
                if !grammar.reflective() {
                    flag(Some(i), ViolationKind::UnexpectedSegment);
                    continue;
                }
                let after_err = prev == Some(Some(StepKind::Erroneous));
                let before_fix = next == Some(Some(StepKind::Corrected));
                if !after_err {
                    flag(Some(i), ViolationKind::ReflectionNotAfterErroneous);
                }
                if !before_fix {
                    flag(Some(i), ViolationKind::ReflectionNotBeforeCorrected);
                }
                if after_err && before_fix {
                    triples += 1;
                    if let (Some(Segment::Step(e)), Some(Segment::Step(c))) = (segs.get(i - 1), segs.get(i + 1)) {
                        if normalize_ws(&e.text) == normalize_ws(&c.text) {
                            flag(Some(i + 1), ViolationKind::DegenerateCorrection);
                        }
                    }
                }
                let has_q = block.question.as_deref().is_some_and(|q| !q.trim().is_empty());
                let has_a = block.answer.as_deref().is_some_and(|a| !a.trim().is_empty());
                let (need_q, need_a) = match grammar {
                    Grammar::Full => (true, true),
                    Grammar::QuestionOnly => (true, false),
                    Grammar::AnswerOnly => (false, true),
                    _ => unreachable!(),
                };
                if (need_q && !has_q) || (need_a && !has_a) {
                    flag(Some(i), ViolationKind::IncompleteReflection);
                }
                if (!need_q && block.question.is_some()) || (!need_a && block.answer.is_some()) {
                    flag(Some(i), ViolationKind::UnexpectedReflectionPart);
                }
                if let (Some(q), Some(a)) = (question, block.answer.as_deref()) {
                    if leaks_question(q, a) {
                        flag(Some(i), ViolationKind::QuestionLeak);
                    }
                }
            }
        }
    }
    if triples == 0 && grammar != Grammar::Plain {
        flag(None, ViolationKind::NoCorrectionTriple);
    }
    if normalize_ws(&t.answer).is_empty() {
        flag(None, ViolationKind::EmptyAnswer);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoReflect,
    QuestionOnly,
    AnswerOnly,
    Original,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoReflect,
        AblationMode::QuestionOnly,
        AblationMode::AnswerOnly,
        AblationMode::Original,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoReflect => "no_reflect",
            AblationMode::QuestionOnly => "question_only",
            AblationMode::AnswerOnly => "answer_only",
            AblationMode::Original => "original",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown ablation mode {s:?}"))
    }
}

/// Result of [`project_ablation`]: a (possibly reflection-free) reflective
/// trajectory, or the reconstructed clean trajectory for `original`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Projected {
    Reflective(ReflectiveTrajectory),
    Plain(Trajectory),
}

impl Projected {
    pub fn render(&self, tokens: &SpecialTokens) -> Result<String, TrajectoryError> {
        match self {
            Projected::Reflective(t) => serialize_training_text(t, tokens),
            Projected::Plain(t) => t.render_checked(tokens),
        }
    }
}

pub fn project_ablation(t: &ReflectiveTrajectory, mode: AblationMode) -> Projected {
    let strip = |keep_q: bool, keep_a: bool| {
        let segments = t
            .segments
            .iter()
            .map(|seg| match seg {
                Segment::Reflection(b) => Segment::Reflection(ReflectionBlock {
                    question: if keep_q { b.question.clone() } else { None },
                    answer: if keep_a { b.answer.clone() } else { None },
                }),
                other => other.clone(),
            })
            .collect();
        ReflectiveTrajectory {
            question_id: t.question_id.clone(),
            segments,
            answer: t.answer.clone(),
        }
    };
    match mode {
        AblationMode::Full => Projected::Reflective(t.clone()),
        AblationMode::QuestionOnly => Projected::Reflective(strip(true, false)),
        AblationMode::AnswerOnly => Projected::Reflective(strip(false, true)),
        AblationMode::NoReflect => {
            let segments = t
                .segments
                .iter()
                .filter(|s| matches!(s, Segment::Step(_)))
                .cloned()
                .collect();
            Projected::Reflective(
                ReflectiveTrajectory {
                    question_id: t.question_id.clone(),
                    segments,
                    answer: t.answer.clone(),
                }
                .normalized(),
            )
        }
        AblationMode::Original => {
            let steps = t
                .segments
                .iter()
                .filter_map(|s| match s {
                    Segment::Step(step) if step.kind != StepKind::Erroneous => Some(step.text.clone()),
                    _ => None,
                })
                .enumerate()
                .map(|(index, text)| Step {
                    index,
                    text,
                    kind: StepKind::Original,
                })
                .collect();
            Projected::Plain(Trajectory {
                question_id: t.question_id.clone(),
                steps,
                answer: t.answer.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: &str, a: &str, i: usize) -> ReflectionPair {
        ReflectionPair {
            question: q.into(),
            answer: a.into(),
            pinpoint_index: i,
        }
    }

    fn base3() -> Trajectory {
        Trajectory::new("q1", &["S1 first.", "S2 second.", "S3 third."], "A final.").unwrap()
    }

    fn texts(t: &ReflectiveTrajectory) -> Vec<(Option<StepKind>, String)> {
        t.segments
            .iter()
            .map(|s| match s {
                Segment::Step(s) => (Some(s.kind), s.text.clone()),
                Segment::Reflection(b) => (None, format!("{:?}|{:?}", b.question, b.answer)),
            })
            .collect()
    }

    #[test]
    fn assemble_places_triple_at_pinpoint() {
        let t = assemble_reflective(&base3(), 1, "E wrong.", &pair("Rq?", "Ra.", 1), "S2 fixed.").unwrap();
        let got = texts(&t);
        assert_eq!(got.len(), 5);
        assert_eq!(got[0], (Some(StepKind::Original), "S1 first.".into()));
        assert_eq!(got[1], (Some(StepKind::Erroneous), "E wrong.".into()));
        assert_eq!(got[2].0, None);
        assert_eq!(got[3], (Some(StepKind::Corrected), "S2 fixed.".into()));
        assert_eq!(got[4], (Some(StepKind::Original), "S3 third.".into()));
        assert_eq!(t.answer, "A final.");
        assert!(validate(&t, None).is_empty());
    }

    #[test]
    fn assemble_single_step() {
        let base = Trajectory::new("q", &["S1."], "A.").unwrap();
        let t = assemble_reflective(&base, 0, "E.", &pair("Rq?", "Ra.", 0), "S1 fixed.").unwrap();
        assert_eq!(t.segments.len(), 3);
        assert!(validate(&t, None).is_empty());
    }

    #[test]
    fn assemble_errors() {
        let p = pair("Rq?", "Ra.", 0);
        assert_eq!(
            assemble_reflective(&base3(), 3, "E", &p, "F").unwrap_err(),
            TrajectoryError::IndexOutOfRange { index: 3, len: 3 }
        );
        assert_eq!(
            assemble_reflective(&base3(), 0, "same text", &p, " same  text ").unwrap_err(),
            TrajectoryError::DegenerateCorrection { index: 0 }
        );
    }

    #[test]
    fn serialize_layout() {
        let t = assemble_reflective(&base3(), 1, "E wrong.", &pair("Why?", "Because.", 1), "S2 fixed.").unwrap();
        let s = serialize_training_text(&t, &SpecialTokens::default()).unwrap();
        assert_eq!(
            s,
            "S1 first.\nE wrong. <Think>Question: Why?\nAnswer: Because.</Think> <Modified>S2 fixed.</Modified>\nS3 third.\nA final."
        );
        assert_eq!(s.matches("<Think>").count(), 1);
        assert!(s.find("</Think>").unwrap() < s.find("<Modified>").unwrap());
        let back = parse_training_text(&s, &SpecialTokens::default()).unwrap();
        assert!(back.same_structure(&t));
    }

    #[test]
    fn serialize_three_triples() {
        let corrections: Vec<_> = (0..3)
            .map(|i| Correction {
                step_index: i,
                erroneous: format!("E{i}."),
                reflection: pair("q?", "a.", i),
                corrected: format!("C{i}."),
            })
            .collect();
        let t = assemble_multi(&base3(), &corrections).unwrap();
        let s = serialize_training_text(&t, &SpecialTokens::default()).unwrap();
        for tok in SpecialTokens::default().as_array() {
            assert_eq!(s.matches(tok).count(), 3, "{tok}");
        }
    }

    #[test]
    fn serialize_rejects_token_in_step() {
        let t = assemble_reflective(&base3(), 1, "E <Think> oops", &pair("q?", "a.", 1), "fixed").unwrap();
        assert!(matches!(
            serialize_training_text(&t, &SpecialTokens::default()),
            Err(TrajectoryError::TokenCollision { .. })
        ));
    }

    #[test]
    fn parse_error_classes() {
        let tk = SpecialTokens::default();
        assert!(matches!(
            parse_training_text("S1\nE </Think> <Think>Question: q</Think>\nA", &tk),
            Err(ParseError::UnbalancedTokens { .. })
        ));
        assert!(matches!(
            parse_training_text("S1\nE <Think>Question: q?\nAnswer: a</Think>\nA", &tk),
            Err(ParseError::GrammarViolation { .. })
        ));
        assert!(matches!(
            parse_training_text("S1\nE <Modified>x</Modified>\nA", &tk),
            Err(ParseError::GrammarViolation { .. })
        ));
        assert!(matches!(
            parse_training_text("E <Think></Think> <Modified>x</Modified>\nA", &tk),
            Err(ParseError::EmptySegment { .. })
        ));
        assert!(matches!(
            parse_training_text("E <Think>Question: q\nAnswer: a</Think> <Modified>x</Modified>", &tk),
            Err(ParseError::EmptySegment { .. })
        ));
        assert!(matches!(
            parse_training_text("only plain\nlines", &tk),
            Err(ParseError::GrammarViolation { .. })
        ));
    }

    #[test]
    fn validate_flags_missing_corrected() {
        let mut t = assemble_reflective(&base3(), 1, "E.", &pair("q?", "a.", 1), "C.").unwrap();
        t.segments.remove(3);
        let report = validate(&t, None);
        assert!(report.contains(&Violation {
            segment: Some(2),
            kind: ViolationKind::ReflectionNotBeforeCorrected
        }));
    }

    #[test]
    fn validate_flags_leak() {
        let q = "A 34-year-old woman presents with ear pain and fever for three days.";
        let leaked = "Since a 34-year-old woman presents with ear pain, give antibiotics.";
        let t = assemble_reflective(&base3(), 0, "E.", &pair("q?", leaked, 0), "C.").unwrap();
        let report = validate(&t, Some(q));
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kind, ViolationKind::QuestionLeak);
        assert!(validate(&t, None).is_empty());
    }

    #[test]
    fn ablations() {
        let tk = SpecialTokens::default();
        let t = assemble_reflective(&base3(), 1, "E.", &pair("q?", "a.", 1), "C.").unwrap();
        assert_eq!(project_ablation(&t, AblationMode::Full), Projected::Reflective(t.clone()));

        let nr = project_ablation(&t, AblationMode::NoReflect);
        let Projected::Reflective(nr_t) = &nr else { panic!() };
        assert!(validate_as(nr_t, Grammar::DirectRetry, None).is_empty());
        let s = nr.render(&tk).unwrap();
        assert_eq!(s, "S1 first.\nE.\nC.\nS3 third.\nA final.");

        let qo = project_ablation(&t, AblationMode::QuestionOnly).render(&tk).unwrap();
        assert!(qo.contains("<Think>Question: q?</Think>"));
        assert!(!qo.contains("Answer:"));
        parse_projected(&qo, &tk, AblationMode::QuestionOnly).unwrap();
        assert!(parse_projected(&qo, &tk, AblationMode::Full).is_err());

        let ao = project_ablation(&t, AblationMode::AnswerOnly).render(&tk).unwrap();
        assert!(ao.contains("<Think>Answer: a.</Think>"));
        assert!(!ao.contains("Question:"));

        let orig = project_ablation(&t, AblationMode::Original).render(&tk).unwrap();
        assert_eq!(orig, "S1 first.\nC.\nS3 third.\nA final.");
        assert_eq!(tk.count_in(&orig), 0);
    }

    #[test]
    fn custom_tokens_roundtrip() {
        let tk = SpecialTokens {
            think_open: "[[t]]".into(),
            think_close: "[[/t]]".into(),
            modified_open: "[[m]]".into(),
            modified_close: "[[/m]]".into(),
        };
        tk.validate().unwrap();
        let t = assemble_reflective(&base3(), 2, "E.", &pair("q?", "a.", 2), "C.").unwrap();
        let s = serialize_training_text(&t, &tk).unwrap();
        assert!(s.contains("[[t]]Question: q?"));
        assert!(parse_training_text(&s, &tk).unwrap().same_structure(&t));
    }

    #[test]
    fn token_validation() {
        let mut tk = SpecialTokens::default();
        tk.validate().unwrap();
        tk.modified_close = tk.think_close.clone();
        assert!(tk.validate().is_err());
    }
}
