//! One validated config for a full run: corpus, quantizer, model, and the
//! two training stages. Everything is checked up front so a bad run fails
//! before any work happens.

use crate::corpus::CorpusConfig;
use crate::error::{AkvsrError, Result};
use crate::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train_asr: TrainConfig,
    pub train_vsr: TrainConfig,
    /// Quantizer cluster count; also the memory slot count N.
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub quantfit_size: usize,
    pub freeze_memory: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::toy(corpus.p);
        RunConfig {
            corpus,
            model,
            train_asr: TrainConfig { steps: 800, ..TrainConfig::default() },
            train_vsr: TrainConfig { steps: 600, ..TrainConfig::default() },
            clusters: 24,
            kmeans_iters: 100,
            train_size: 96,
            test_size: 32,
            quantfit_size: 48,
            freeze_memory: true,
        }
    }
}

impl RunConfig {
    /// Reseeds every stage from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train_asr.seed = seed;
        self.train_vsr.seed = seed.wrapping_add(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train_asr.validate()?;
        self.train_vsr.validate()?;
        if self.model.phonemes != self.corpus.p {
            return Err(AkvsrError::Config(format!(
                "model phoneme count {} != corpus phoneme count {}",
                self.model.phonemes, self.corpus.p
            )));
        }
        if self.model.d != self.corpus.d {
            return Err(AkvsrError::Config(format!(
                "model dim {} != corpus visual dim {}",
                self.model.d, self.corpus.d
            )));
        }
        if self.clusters < 2 {
            return Err(AkvsrError::Config(format!(
                "need at least 2 clusters, got {}",
                self.clusters
            )));
        }
        if self.kmeans_iters == 0 {
            return Err(AkvsrError::Config("kmeans_iters must be positive".into()));
        }
        if self.train_size == 0 || self.test_size == 0 || self.quantfit_size == 0 {
            return Err(AkvsrError::Config("all split sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AkvsrError::File {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| AkvsrError::File {
            path: path.display().to_string(),
            source: e,
        })
    }
}
