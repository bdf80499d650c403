//! Pipeline configuration: a JSON file whose every field can be overridden
//! on the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::esg::{DEFAULT_ESG_CAP, DEFAULT_SYNONYM_THRESHOLD};
use crate::filter::DEFAULT_BUDGET;
use crate::r3::ParseMode;
use crate::select::DEFAULT_SALIENCE_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerChoice {
    Whitespace,
    Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerChoice {
    Oracle,
    Heuristic,
}

/// Where the salient set used for tagging, guidance and adherence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSource {
    Oracle,
    Predicted,
}

macro_rules! from_str_via_serde {
    ($($t:ty),*) => {$(
        impl std::str::FromStr for $t {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("invalid value {s:?}"))
            }
        }
    )*};
}

from_str_via_serde!(TokenizerChoice, ScorerChoice, GuidanceSource);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Admissions JSONL read by `ingest`.
    pub corpus: Option<PathBuf>,
    /// Entity lexicon TSV.
    pub gazetteer: Option<PathBuf>,
    /// Precomputed surface embeddings; hashed character n-grams otherwise.
    pub embeddings: Option<PathBuf>,
    /// Salience model JSON; `<outputs>/model.json` when unset.
    pub model: Option<PathBuf>,
    /// Directory holding every stage artifact.
    pub outputs: PathBuf,
    pub synonym_threshold: f64,
    pub salience_threshold: f64,
    pub budget: usize,
    pub esg_cap: usize,
    pub seed: u64,
    pub tokenizer: TokenizerChoice,
    /// Vocabulary file for the `vocab` tokenizer.
    pub vocab: Option<PathBuf>,
    pub parse_mode: ParseMode,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub scorer: ScorerChoice,
    pub keep_headers: Option<PathBuf>,
    pub drop_headers: Option<PathBuf>,
    /// Run extraction on filtered notes rather than the raw admissions.
    pub use_filtered: bool,
    pub guidance: GuidanceSource,
    /// Chat template JSON for `prompt`.
    pub template: Option<PathBuf>,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            gazetteer: None,
            embeddings: None,
            model: None,
            outputs: PathBuf::from("out"),
            synonym_threshold: DEFAULT_SYNONYM_THRESHOLD,
            salience_threshold: DEFAULT_SALIENCE_THRESHOLD,
            budget: DEFAULT_BUDGET,
            esg_cap: DEFAULT_ESG_CAP,
            seed: 0,
            tokenizer: TokenizerChoice::Whitespace,
            vocab: None,
            parse_mode: ParseMode::Lenient,
            jobs: 0,
            scorer: ScorerChoice::Oracle,
            keep_headers: None,
            drop_headers: None,
            use_filtered: false,
            guidance: GuidanceSource::Oracle,
            template: None,
            epochs: 3000,
            learning_rate: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("synonym_threshold", self.synonym_threshold), ("salience_threshold", self.salience_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.budget == 0 {
            return Err("budget must be at least 1".into());
        }
        if self.esg_cap == 0 {
            return Err("esg_cap must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.tokenizer == TokenizerChoice::Vocab && self.vocab.is_none() {
            return Err("tokenizer \"vocab\" needs a vocab file".into());
        }
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.outputs.join("model.json"))
    }
}
