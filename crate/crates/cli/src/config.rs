//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use ivtlr::curriculum::TrainConfig;
use ivtlr::latent::LatentOptions;
use ivtlr::model::ModelConfig;
use ivtlr::tasks::TaskSpec;
use ivtlr::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Latent-vision length; falls back to `train.k`.
    pub k: Option<usize>,
    pub exclude_previous: Option<bool>,
    /// Latent steps at evaluation; falls back to `n_stages - 1`.
    pub n_latent_eval: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub latent: LatentConfig,
    pub task: TaskSpec,
    pub io: IoConfig,
    /// Overrides `train.seed` and `task.seed` when present.
    pub seed: Option<u64>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills every optional field and makes the duplicated knobs agree.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.task.seed = seed;
        }
        self.seed = Some(self.train.seed);
        let k = self.latent.k.unwrap_or(self.train.k);
        self.train.k = k;
        self.model.default_k = k;
        self.latent.k = Some(k);
        self.latent.exclude_previous.get_or_insert(true);
        let n_eval = *self
            .latent
            .n_latent_eval
            .get_or_insert(self.train.n_stages.saturating_sub(1));
        self.model.validate()?;
        self.train.validate()?;
        if k == 0 {
            return Err(Error::Config("latent k must be positive".into()));
        }
        if n_eval >= self.train.n_stages.max(1) + 1 {
            return Err(Error::Config(format!(
                "n_latent_eval {n_eval} exceeds the {} trained stages",
                self.train.n_stages
            )));
        }
        Ok(self)
    }

    pub fn latent_options(&self) -> LatentOptions {
        LatentOptions {
            k: self.latent.k.unwrap_or(self.train.k),
            exclude_previous: self.latent.exclude_previous.unwrap_or(true),
            ..LatentOptions::default()
        }
    }

    pub fn n_latent_eval(&self) -> usize {
        self.latent
            .n_latent_eval
            .unwrap_or(self.train.n_stages.saturating_sub(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let c = Config::parse("{}").unwrap().resolve().unwrap();
        assert_eq!(c.train.learning_rate, 4e-5);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.n_stages, 4);
        assert_eq!(c.latent.k, Some(4));
        assert_eq!(c.latent.n_latent_eval, Some(3));
        assert_eq!(c.latent.exclude_previous, Some(true));
        assert_eq!(c.task, TaskSpec::default());
        let again = Config::parse(&serde_json::to_string(&c).unwrap()).unwrap().resolve().unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse(r#"{"modle": {}}"#).is_err());
        assert!(Config::parse(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(Config::parse(r#"{"latent": {"k": 2, "extra": true}}"#).is_err());
    }

    #[test]
    fn latent_k_and_seed_propagate() {
        let c = Config::parse(r#"{"latent": {"k": 8}, "seed": 5}"#).unwrap().resolve().unwrap();
        assert_eq!((c.train.k, c.model.default_k, c.latent_options().k), (8, 8, 8));
        assert_eq!((c.train.seed, c.task.seed), (5, 5));
    }

    #[test]
    fn malformed_json_reports_position() {
        let e = Config::parse("{\n  \"train\": {,}\n}").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(e.contains("column"), "{e}");
    }
}
