//! Run configuration: one TOML file, flag overrides, built-in defaults.
//!
//! Precedence is flags over config file over defaults. The run seed is the
//! only seed: it feeds the stub teacher, the per-question selection RNG, and
//! every output file header. Endpoint secrets come exclusively from the
//! `MORSD_API_KEY` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::ExportConfig;
use crate::selector::SelectionConfig;
use crate::teacher::GenerationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub questions: PathBuf,
    pub rationales: PathBuf,
    pub scored: PathBuf,
    pub selected: PathBuf,
    pub verdicts: PathBuf,
    pub report: PathBuf,
    pub sft: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            questions: "questions.jsonl".into(),
            rationales: "rationales.jsonl".into(),
            scored: "scored.jsonl".into(),
            selected: "selected.jsonl".into(),
            verdicts: "verdicts.jsonl".into(),
            report: "report.json".into(),
            sft: "sft.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    /// `oracle:` (or `oracle:ngram`) for the built-in n-gram oracle, otherwise
    /// a completions endpoint URL with echo + logprobs support.
    pub endpoint_url: String,
    pub model_name: String,
    pub oracle_order: usize,
    pub oracle_alpha: f64,
    /// Optional plain-text training corpus, one document per line. Without it
    /// the oracle trains on the run's own rationales in scoring format.
    pub oracle_train_file: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retry_budget: u32,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            endpoint_url: "oracle:ngram".to_string(),
            model_name: "student".to_string(),
            oracle_order: 3,
            oracle_alpha: 0.1,
            oracle_train_file: None,
            max_in_flight: 4,
            retry_budget: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    /// `stub:` for the offline referee, otherwise a chat completions URL.
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    /// Optional scripted replies for the stub referee: a JSON array of
    /// {"question_id", "order", "reply"} objects.
    pub replies_file: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retry_budget: u32,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            endpoint_url: "stub:".to_string(),
            model_name: "referee".to_string(),
            temperature: 0.0,
            replies_file: None,
            max_in_flight: 4,
            retry_budget: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub generation: GenerationConfig,
    pub selection: SelectionConfig,
    pub scorer: ScorerConfig,
    pub judge: JudgeConfig,
    pub export: ExportConfig,
}

impl RunConfig {
    /// Loads a TOML config file, or defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingInput(p.to_path_buf()),
                    _ => Error::Io(e),
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
        };
        // The run seed wins over any seed echoed inside the selection block.
        config.selection.seed = config.seed.unwrap_or(config.selection.seed);
        config.seed = Some(config.selection.seed);
        Ok(config)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.selection.seed)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.selection.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.selection.validate()?;
        self.export.validate()?;
        if self.scorer.oracle_order < 1 || self.scorer.oracle_alpha <= 0.0 {
            return Err(Error::InvalidConfig(
                "oracle_order must be >= 1 and oracle_alpha > 0".into(),
            ));
        }
        if self.scorer.endpoint_url.starts_with("oracle:") {
            let kind = self.scorer.endpoint_url.trim_start_matches("oracle:");
            if !kind.is_empty() && kind != "ngram" {
                return Err(Error::InvalidConfig(format!("unknown oracle kind {kind:?}")));
            }
        }
        Ok(())
    }
}
