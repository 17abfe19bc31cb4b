//! The run configuration: one TOML document holding every module's settings.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::corpus::CorpusConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::ngram::DEFAULT_DISCOUNT;
use crate::train::TrainConfig;
use crate::util::fingerprint;

/// Environment variable overriding the directory that holds run outputs.
pub const RUN_ROOT_ENV: &str = "HAED_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NGramConfig {
    pub order: usize,
    pub discount: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            order: 3,
            discount: DEFAULT_DISCOUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Decoder LM weights trained for the sweep table (the model's own
    /// `lambda` is always trained).
    pub lambda_sweep: Vec<f64>,
    /// Train the conventional-decoder baseline for the comparison rows.
    pub aed_baseline: bool,
    /// Train the decoder-free ablation.
    pub no_decoder_ablation: bool,
    /// Limit each evaluated test set to its first N utterances; 0 keeps all.
    pub max_test_utterances: usize,
    /// Decoder-LM perplexity is measured on this many dev references; 0 keeps all.
    pub max_ppl_utterances: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lambda_sweep: vec![0.0, 0.2, 0.5, 0.8],
            aed_baseline: true,
            no_decoder_ablation: true,
            max_test_utterances: 0,
            max_ppl_utterances: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub decode: DecodeConfig,
    pub ngram: NGramConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            decode: DecodeConfig::default(),
            ngram: NGramConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.corpus.validate().map_err(as_config)?;
        self.model.validate().map_err(as_config)?;
        self.train.optimizer.validate().map_err(as_config)?;
        self.adapt.validate().map_err(as_config)?;
        self.decode.validate().map_err(as_config)?;
        if self.model.encoder.feature_dim != self.corpus.render.feature_dim {
            return Err(Error::Config(format!(
                "encoder feature_dim {} differs from the corpus feature_dim {}",
                self.model.encoder.feature_dim, self.corpus.render.feature_dim
            )));
        }
        if self.ngram.order < 1 {
            return Err(Error::Config("ngram order must be >= 1".into()));
        }
        if self.train.steps == 0 {
            return Err(Error::Config("train steps must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        fingerprint(&json)
    }

    /// `$HAED_RUN_ROOT/<fingerprint>` or `runs/<fingerprint>`.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_eq!(cfg.fingerprint().len(), 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 3\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[model]\nlambda = 0.5\nwidth = 3\n").is_err());
        let ok = RunConfig::from_toml("[model]\nlambda = 0.5\n").unwrap();
        assert_eq!(ok.model.lambda, 0.5);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let mut cfg = RunConfig::default();
        let a = cfg.fingerprint();
        cfg.train.steps += 1;
        assert_ne!(a, cfg.fingerprint());
    }
}
