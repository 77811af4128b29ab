//! TOML pipeline configuration.
//!
//! Relative paths resolve against the directory of the config file. API keys
//! are never read from here, only the name of the variable that holds one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConsultationFields, MultichoiceFields, PreprocessPolicy};
use crate::emit::EmitParams;
use crate::eval::EvalConfig;
use crate::filter::FilterParams;
use crate::gateway::BackendConfig;
use crate::pinpoint::{Rg1Params, Rg2Params};
use crate::reflection::ReflectParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub consultations: Option<PathBuf>,
    pub multichoice: Option<PathBuf>,
    pub workdir: PathBuf,
    pub outputs: PathBuf,
    /// Directory of prompt-template overrides.
    pub prompts: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            consultations: None,
            multichoice: None,
            workdir: "work".into(),
            outputs: "out".into(),
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusFields {
    pub consultation: ConsultationFields,
    pub multichoice: MultichoiceFields,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinpointConfig {
    pub rg1: Rg1Params,
    pub rg2: Rg2Params,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Records drawn per source for the training files.
    pub consultations: usize,
    pub multichoice: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            consultations: 1000,
            multichoice: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub fields: MultichoiceFields,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(flatten)]
    pub config: EvalConfig,
    pub benchmarks: Vec<Benchmark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Records processed between checkpoint writes.
    pub chunk_size: usize,
    pub paths: Paths,
    pub corpus: CorpusFields,
    pub construction: BackendConfig,
    pub filter_model: BackendConfig,
    pub eval_target: BackendConfig,
    pub preprocess: PreprocessPolicy,
    pub pinpoint: PinpointConfig,
    pub reflect: ReflectParams,
    pub filter: FilterParams,
    pub sample: SampleConfig,
    pub emit: EmitParams,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            chunk_size: 64,
            paths: Paths::default(),
            corpus: CorpusFields::default(),
            construction: BackendConfig::default(),
            filter_model: BackendConfig::default(),
            eval_target: BackendConfig::default(),
            preprocess: PreprocessPolicy::default(),
            pinpoint: PinpointConfig::default(),
            reflect: ReflectParams::default(),
            filter: FilterParams::default(),
            sample: SampleConfig::default(),
            emit: EmitParams::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })
    }

    /// Loads, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        p.consultations.iter_mut().for_each(fix);
        p.multichoice.iter_mut().for_each(fix);
        p.prompts.iter_mut().for_each(fix);
        fix(&mut p.workdir);
        fix(&mut p.outputs);
        for b in [&mut self.construction, &mut self.filter_model, &mut self.eval_target] {
            b.mock_script.iter_mut().for_each(fix);
        }
        self.eval.benchmarks.iter_mut().for_each(|b| fix(&mut b.path));
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, b) in [
            ("construction", &self.construction),
            ("filter_model", &self.filter_model),
            ("eval_target", &self.eval_target),
        ] {
            b.validate().map_err(|e| invalid(name, e))?;
        }
        if self.chunk_size == 0 {
            return Err(invalid("chunk_size", "must be >= 1"));
        }
        if self.pinpoint.rg1.samples == 0 {
            return Err(invalid("pinpoint.rg1.samples", "must be >= 1"));
        }
        self.pinpoint
            .rg2
            .validate()
            .map_err(|e| invalid("pinpoint.rg2", e))?;
        self.filter.validate().map_err(|e| invalid("filter", e))?;
        self.emit.tokens.validate().map_err(|e| invalid("emit.tokens", e))?;
        if self.emit.modes.is_empty() {
            return Err(invalid("emit.modes", "at least one mode is required"));
        }
        if self.eval.config.repeats == 0 {
            return Err(invalid("eval.repeats", "must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text, "mem").unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cfg = PipelineConfig::from_toml_str("[filter]\ntrials = 10\nretain_threshold = 11\n", "mem").unwrap();
        match cfg.validate() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "filter"),
            other => panic!("{other:?}"),
        }
        let err = PipelineConfig::from_toml_str("[filter]\ntrails = 3\n", "mem").unwrap_err();
        assert!(err.to_string().contains("trails"));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = PipelineConfig::from_toml_str(
            "[paths]\nconsultations = \"data/c.jsonl\"\nworkdir = \"/abs/work\"\n",
            "mem",
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/etc/rf"));
        assert_eq!(cfg.paths.consultations, Some(PathBuf::from("/etc/rf/data/c.jsonl")));
        assert_eq!(cfg.paths.workdir, PathBuf::from("/abs/work"));
    }
}
