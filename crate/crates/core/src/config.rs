//! The JSON run configuration shared by every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ShapeWorldSpec;
use crate::embeddings::EmbeddingTable;
use crate::error::{config_err, Error, Result};
use crate::inference::FusionConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Everything that affects results. Paths and verbosity stay on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: ShapeWorldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| config_err!("run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Checks every section, and that the model fits the world's canvas.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.model.canvas() != self.world.canvas {
            return Err(config_err!(
                "model expects {0}x{0} clips but the world renders {1}x{1}",
                self.model.canvas(),
                self.world.canvas
            ));
        }
        if self.train.clip_len > self.world.frames {
            return Err(config_err!(
                "clip_len {} exceeds the {} rendered frames",
                self.train.clip_len,
                self.world.frames
            ));
        }
        Ok(())
    }
}

/// Word table for a trained model: `path` if given, else the seeded fallback.
pub fn word_table(
    model: &ModelConfig,
    train: &TrainConfig,
    path: Option<&Path>,
) -> Result<EmbeddingTable> {
    let table = match path {
        Some(p) => EmbeddingTable::load(p, model.embed_dim)?.with_fallback_seed(train.seed),
        None => EmbeddingTable::empty(model.embed_dim, train.seed)?,
    };
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::parse(r#"{"train": {"iterations": 5}}"#).unwrap();
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.world, ShapeWorldSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"learning_rate": 0.1}}"#).is_err());
    }

    #[test]
    fn canvas_mismatch_is_rejected() {
        let err = RunConfig::parse(r#"{"world": {"canvas": 48}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
