//! Editable prompt-template catalog.
//!
//! Templates are plain text with `{name}` placeholders (lowercase letters,
//! digits and underscores). Any other brace text is left as-is, so JSON
//! examples inside a template need no escaping. A directory of `<name>.txt`
//! files overrides the built-in defaults one template at a time.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} needs variable {{{variable}}}")]
    MissingVariable { template: String, variable: String },
    #[error("reading {path}: {msg}")]
    Io { path: String, msg: String },
}

pub const SYSTEM: &str = "system";
pub const RELEVANCE: &str = "relevance";
pub const RG1_SAMPLE: &str = "rg1_sample";
pub const RG2_EXTRACT: &str = "rg2_extract";
pub const RG2_FILL: &str = "rg2_fill";
pub const JUDGE_EQUIVALENCE: &str = "judge_equivalence";
pub const REFLECT_QUESTION: &str = "reflect_question";
pub const REFLECT_ANSWER: &str = "reflect_answer";
pub const MODIFY_RG1: &str = "modify_rg1";
pub const MODIFY_RG2: &str = "modify_rg2";
pub const FILTER_RG1: &str = "filter_rg1";
pub const FILTER_RG2: &str = "filter_rg2";
pub const EVAL_ANSWER: &str = "eval_answer";

const DEFAULTS: &[(&str, &str)] = &[
    (SYSTEM, include_str!("../prompts/system.txt")),
    (RELEVANCE, include_str!("../prompts/relevance.txt")),
    (RG1_SAMPLE, include_str!("../prompts/rg1_sample.txt")),
    (RG2_EXTRACT, include_str!("../prompts/rg2_extract.txt")),
    (RG2_FILL, include_str!("../prompts/rg2_fill.txt")),
    (JUDGE_EQUIVALENCE, include_str!("../prompts/judge_equivalence.txt")),
    (REFLECT_QUESTION, include_str!("../prompts/reflect_question.txt")),
    (REFLECT_ANSWER, include_str!("../prompts/reflect_answer.txt")),
    (MODIFY_RG1, include_str!("../prompts/modify_rg1.txt")),
    (MODIFY_RG2, include_str!("../prompts/modify_rg2.txt")),
    (FILTER_RG1, include_str!("../prompts/filter_rg1.txt")),
    (FILTER_RG2, include_str!("../prompts/filter_rg2.txt")),
    (EVAL_ANSWER, include_str!("../prompts/eval_answer.txt")),
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    templates: BTreeMap<String, String>,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self {
            templates: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
                .collect(),
        }
    }
}

impl PromptCatalog {
    /// Built-in defaults overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut cat = Self::default();
        let names: Vec<String> = cat.templates.keys().cloned().collect();
        for name in names {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    msg: e.to_string(),
                })?;
                cat.templates.insert(name, text.trim_end().to_string());
            }
        }
        Ok(cat)
    }

    /// Writes every template to `dir` as `<name>.txt`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in &self.templates {
            std::fs::write(dir.join(format!("{name}.txt")), format!("{text}\n"))?;
        }
        Ok(())
    }

    pub fn set(&mut self, name: &str, text: impl Into<String>) {
        self.templates.insert(name.to_string(), text.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }

    pub fn system(&self) -> &str {
        self.get(SYSTEM).unwrap_or("")
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))?;
        let mut missing = None;
        let out = placeholder_re().replace_all(template, |caps: &regex::Captures<'_>| {
            let key = &caps[1];
            match vars.iter().find(|(k, _)| *k == key) {
                Some((_, v)) => v.to_string(),
                None => {
                    missing.get_or_insert_with(|| key.to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(variable) => Err(PromptError::MissingVariable {
                template: name.to_string(),
                variable,
            }),
            None => Ok(out.into_owned()),
        }
    }
}
