use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, ChatResponse, GatewayError};
use crate::seed;

const FILLER: &[&str] = &[
    "the", "patient", "symptoms", "suggest", "further", "evaluation", "is", "advised", "clinical",
    "findings", "support", "management", "with", "rest", "and", "follow-up", "monitoring", "of",
    "response", "treatment", "should", "consider", "history", "examination", "likely", "cause",
];

/// Deterministic filler text keyed by seed, tag and prompt content.
pub fn seeded_text(seed: u64, req: &ChatRequest) -> String {
    let prompt = req.prompt_text();
    let mut rng = seed::rng(seed, &["seeded-text", &req.tag, &prompt]);
    let n = rng.random_range(8..16);
    let words: Vec<&str> = (0..n).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
    let mut s = words.join(" ");
    if let Some(first) = s.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    s.push('.');
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Case-insensitive substring of the prompt text.
    #[serde(rename = "match")]
    pub matcher: String,
    /// Responses returned in call order.
    pub responses: Vec<String>,
}

impl ScriptRule {
    pub fn new<S: Into<String>>(matcher: impl Into<String>, responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            matcher: matcher.into(),
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }
}

/// Scripted mock backend. The first rule whose matcher occurs in the prompt
/// answers with its next scripted response; unmatched prompts (and exhausted
/// rules outside strict mode) fall back to [`seeded_text`].
pub struct ScriptedMock {
    rules: Vec<ScriptRule>,
    lowered: Vec<String>,
    cursors: Mutex<Vec<usize>>,
    seed: u64,
    strict: bool,
}

pub fn script_mock(rules: Vec<ScriptRule>, seed: u64) -> ScriptedMock {
    let lowered = rules.iter().map(|r| r.matcher.to_lowercase()).collect();
    let cursors = Mutex::new(vec![0; rules.len()]);
    ScriptedMock {
        rules,
        lowered,
        cursors,
        seed,
        strict: false,
    }
}

impl ScriptedMock {
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn from_json_file(path: &Path, seed: u64) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Ok(script_mock(rules, seed))
    }
}

impl Backend for ScriptedMock {
    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let prompt = req.prompt_text().to_lowercase();
        if let Some(i) = self.lowered.iter().position(|m| prompt.contains(m.as_str())) {
            let mut cursors = self.cursors.lock();
            let at = cursors[i];
            if let Some(resp) = self.rules[i].responses.get(at) {
                cursors[i] += 1;
                return Ok(ChatResponse::stop(resp.clone()));
            }
            if self.strict {
                return Err(GatewayError::ScriptExhausted {
                    matcher: self.rules[i].matcher.clone(),
                });
            }
        }
        Ok(ChatResponse::stop(seeded_text(self.seed, req)))
    }
}

/// Backend defined by a closure.
pub struct FnBackend<F>(F);

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (self.0)(req)
    }
}

/// Wraps a backend, holding each call open for `delay` and recording the
/// highest number of concurrent entries observed.
pub struct ProbeBackend<B> {
    inner: B,
    delay: Duration,
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl<B: Backend> ProbeBackend<B> {
    pub fn new(inner: B, delay: Duration) -> Self {
        Self {
            inner,
            delay,
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for ProbeBackend<B> {
    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        let out = self.inner.call(req);
        self.current.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::GenerationParams;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::prompt("t", None, text, GenerationParams::default())
    }

    #[test]
    fn scripted_sequence() {
        let m = script_mock(vec![ScriptRule::new("final answer", ["A", "B", "A"])], 1);
        let got: Vec<_> = (0..3)
            .map(|_| m.call(&req("Give the FINAL ANSWER now")).unwrap().content)
            .collect();
        assert_eq!(got, ["A", "B", "A"]);
    }

    #[test]
    fn strict_exhaustion() {
        let m = script_mock(vec![ScriptRule::new("final answer", ["A", "B", "A"])], 1).strict();
        for _ in 0..3 {
            m.call(&req("final answer")).unwrap();
        }
        assert_eq!(
            m.call(&req("final answer")),
            Err(GatewayError::ScriptExhausted {
                matcher: "final answer".into()
            })
        );
    }

    #[test]
    fn unmatched_prompts_are_deterministic() {
        let run = |seed| {
            let m = script_mock(vec![ScriptRule::new("zzz", ["x"])], seed);
            (0..50)
                .map(|i| m.call(&req(&format!("prompt {i}"))).unwrap().content)
                .collect::<Vec<_>>()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        assert_ne!(a, run(12));
        assert!(a.iter().all(|s| !s.is_empty()));
    }
}
