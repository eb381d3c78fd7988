//! Declarative experiment configuration: one file drives corpus generation,
//! every training stage, and the benchmark suites.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{FinetuneConfig, GeneratorConfig, PretrainConfig};
use crate::pseudolabel::ClassifierConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SuiteGrids {
    /// Pseudo-label ratios for the strategy grids.
    pub ratios: Vec<f64>,
    /// Labeled-shot counts for the data-variation grid.
    pub shots_grid: Vec<usize>,
    /// Unpaired-speech minutes for the data-variation grid.
    pub minutes_grid: Vec<f64>,
    /// Classifier-shot counts for the pseudo-label-quality grid.
    pub asr_shots_grid: Vec<usize>,
    /// Alpha for the soft mixing function.
    pub soft_alpha: f64,
    /// Fixed ratio for the pseudo-label-quality and fig3 comparisons.
    pub main_ratio: f64,
    /// Labeled shots used by the strategy-grid suites.
    pub table_shots: usize,
}

impl Default for SuiteGrids {
    fn default() -> Self {
        SuiteGrids {
            ratios: vec![0.25, 0.5, 0.75, 1.0],
            shots_grid: vec![4, 16, 64],
            minutes_grid: vec![0.0, 15.0, 60.0, 240.0],
            asr_shots_grid: vec![4, 16, 64],
            soft_alpha: 0.9,
            main_ratio: 0.75,
            table_shots: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub world_seed: u64,
    /// Run seeds: each run re-draws the target split and the fine-tuning
    /// stream; aggregates are means over these.
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    pub finetune: FinetuneConfig,
    pub suite: SuiteGrids,
    /// Worker-pool size for suite cells; 0 means one worker per core.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            world_seed: 42,
            seeds: vec![1, 2, 3, 4, 5],
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            generator: GeneratorConfig::default(),
            classifier: ClassifierConfig::default(),
            finetune: FinetuneConfig::default(),
            suite: SuiteGrids::default(),
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version: expected {CONFIG_FORMAT_VERSION}, got {}",
                self.format_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: must list at least one run seed".into()));
        }
        if self.suite.ratios.is_empty() {
            return Err(Error::Config("suite.ratios: must be non-empty".into()));
        }
        for r in &self.suite.ratios {
            if !(0.0 < *r && *r <= 1.0) {
                return Err(Error::Config(format!("suite.ratios: {r} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.suite.soft_alpha) {
            return Err(Error::Config(format!(
                "suite.soft_alpha: {} outside [0, 1]",
                self.suite.soft_alpha
            )));
        }
        if self.suite.shots_grid.is_empty() || self.suite.minutes_grid.is_empty() {
            return Err(Error::Config("suite grids must be non-empty".into()));
        }
        if self.suite.asr_shots_grid.is_empty() {
            return Err(Error::Config("suite.asr_shots_grid: must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.pretrain.p_repr) {
            return Err(Error::Config(format!(
                "pretrain.p_repr: {} outside [0, 1)",
                self.pretrain.p_repr
            )));
        }
        if self.model.frame_dim != self.corpus.frame_dim
            || self.model.ssl_dim != self.corpus.ssl_dim
            || self.model.ssl_layers != self.corpus.ssl_layers
        {
            return Err(Error::Config(
                "model frame_dim/ssl_dim/ssl_layers must match the corpus".into(),
            ));
        }
        if self.corpus.utt_len_min < 1 || self.corpus.utt_len_max > 64 {
            return Err(Error::Config("corpus utterance length range outside [1, 64]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable content hash (canonical JSON bytes).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn bad_fields_are_named_in_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("seeds"));
        let mut cfg = ExperimentConfig::default();
        cfg.suite.ratios = vec![1.5];
        assert!(cfg.validate().unwrap_err().to_string().contains("ratios"));
        let mut cfg = ExperimentConfig::default();
        cfg.model.frame_dim = 3;
        assert!(cfg.validate().unwrap_err().to_string().contains("frame_dim"));
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("world_seed = 7\n").unwrap();
        assert_eq!(cfg.world_seed, 7);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn hash_tracks_any_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.world_seed = 43;
        assert_ne!(a.hash(), b.hash());
    }
}
