//! Experiment configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::features::FbankConfig;
use crate::nn::NetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Test utterances in the fixed clean/noisy set for the paired MSE.
    pub paired_utterances: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_target: 280, n_nontarget: 2000, paired_utterances: 80 }
    }
}

/// Everything a run needs. `seed` drives training and evaluation noise;
/// `corpus_seed` drives corpus synthesis and trial selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus_seed: u64,
    pub corpus: CorpusConfig,
    pub fbank: FbankConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus_seed: 7,
            corpus: CorpusConfig::default(),
            fbank: FbankConfig::default(),
            net: NetConfig::desk(CorpusConfig::default().n_speakers),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.fbank.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.net.n_mels != self.fbank.n_mels {
            return Err(Error::Config(format!("net.n_mels {} differs from fbank.n_mels {}", self.net.n_mels, self.fbank.n_mels)));
        }
        if self.eval.n_target == 0 || self.eval.n_nontarget == 0 {
            return Err(Error::Config("eval needs target and nontarget trials".into()));
        }
        Ok(())
    }

    /// Training configuration with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
