//! Run configuration: one JSON document that fully specifies a training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{canonical_json, ModelConfig};
use crate::embeddings::{load_semantic, SemanticStore};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::events::{filter_min_interactions, leave_one_out_split, load_events, weekly_subsessions, Session, SplitSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub events: PathBuf,
    /// Directory holding the item and query semantic tables.
    pub semantic_dir: PathBuf,
    /// Users with fewer interactions are dropped; 0 keeps everyone.
    pub min_interactions: usize,
    /// Split histories into weekly sub-sessions of at most this many events.
    pub weekly_last_n: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { events: PathBuf::from("data/events.jsonl"), semantic_dir: PathBuf::from("data"), min_interactions: 0, weekly_last_n: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into the model, trainer and evaluation sections.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.sgck")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.jsonl")
    }
}

/// Sessions, their split and the semantic tables for a run.
pub struct RunData {
    pub sessions: Vec<Session>,
    pub split: SplitSpec,
    pub store: SemanticStore,
}

impl RunData {
    pub fn load(data: &DataConfig, model: &ModelConfig) -> Result<Self> {
        let mut sessions = load_events(&data.events)?;
        if let Some(n) = data.weekly_last_n {
            sessions = weekly_subsessions(&sessions, n);
        }
        if data.min_interactions > 0 {
            sessions = filter_min_interactions(&sessions, data.min_interactions);
        }
        let store = load_semantic(&data.semantic_dir, model.item_semantic_dim, model.query_dim)?;
        let split = leave_one_out_split(&sessions);
        Ok(Self { sessions, split, store })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"train": {"stpes": 3}}"#).is_err());
    }

    #[test]
    fn master_seed_propagates() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "train": {"steps": 3}}"#).unwrap();
        assert_eq!((cfg.model.seed, cfg.train.seed, cfg.eval.seed, cfg.train.steps), (7, 7, 7, 3));
    }

    #[test]
    fn canonical_json_round_trips() {
        let cfg = RunConfig::default().with_seed(3);
        let text = cfg.to_canonical_json().unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert!(text.contains("\"model\""));
    }
}
