//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::memory::ReadHeadConfig;
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub memory_file: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "run/corpus".into(),
            memory_file: "run/memory.txt".into(),
            checkpoint_dir: "run/checkpoints".into(),
            metrics_out: "run/metrics".into(),
        }
    }
}

/// Encoder shape; feature and embedding sizes come from the corpus section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderShape {
    pub num_layers: usize,
    pub insertion_layer: usize,
    pub hidden_size: usize,
    pub post_concat_size: Option<usize>,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderShape {
            num_layers: e.num_layers,
            insertion_layer: e.insertion_layer,
            hidden_size: e.hidden_size,
            post_concat_size: e.post_concat_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderShape,
    pub read_head: ReadHeadConfig,
    pub decoder: DecoderConfig,
    pub trainer: TrainerConfig,
    pub variant: Option<Variant>,
    /// Seed of the speaker-change pairing.
    pub pairing_seed: u64,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(config)
    }

    pub fn variant(&self) -> Variant {
        self.variant.unwrap_or(Variant::Memory)
    }

    /// Model configuration for `variant`.
    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let adaptation = variant.adaptation();
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: self.encoder.num_layers,
                insertion_layer: self.encoder.insertion_layer,
                hidden_size: self.encoder.hidden_size,
                post_concat_size: self.encoder.post_concat_size,
                feature_dim: self.corpus.feature_dim,
                embedding_dim: self.corpus.embedding_dim,
                adaptation,
            },
            read_head: self.read_head,
            decoder: self.decoder.clone(),
            vocab_size: self.corpus.vocab_size + 3,
        }
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.trainer.validate()?;
        self.model_config(self.variant()).validate()?;
        if self.encoder.insertion_layer > self.encoder.num_layers {
            return Err(Error::Config(format!(
                "insertion layer {} exceeds encoder depth {}",
                self.encoder.insertion_layer, self.encoder.num_layers
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"trainer": {"lambda": 0.5}}"#).unwrap();
        assert_eq!(partial.trainer.lambda, 0.5);
        assert_eq!(partial.corpus, CorpusConfig::default());
    }

    #[test]
    fn cross_field_errors() {
        let mut c = RunConfig::default();
        c.encoder.insertion_layer = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.trainer.lambda = 2.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.corpus.vocab_size = 1;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
