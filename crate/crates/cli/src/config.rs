use std::path::{Path, PathBuf};

use ctr_core::bench::{BenchConfig, BenchMethod};
use ctr_core::eval::CvOptions;
use ctr_core::io::Imputation;
use ctr_core::synth::SynthConfig;
use ctr_core::train::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Failure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<BenchMethod>,
    pub period_thresholds: Vec<f64>,
    pub period_pair: (BenchMethod, BenchMethod),
    /// Loss for every benchmarked model; the synthetic labels carry no censoring.
    pub loss: LossKind,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            methods: b.methods,
            period_thresholds: b.period_thresholds,
            period_pair: b.period_pair,
            loss: b.train.loss,
        }
    }
}

/// Everything a run needs, as read from the TOML config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Shared by generation, training, and fold assignment.
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub imputation: Imputation,
    pub output_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Fold settings; folds are stratified by censoring when this section is absent.
    pub cv: Option<CvOptions>,
    pub bench: BenchSection,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    /// Applies the seed everywhere it is used; fails when no seed was given.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = flag
            .or(self.seed)
            .ok_or_else(|| Failure::usage("a seed is required: pass --seed or set `seed` in the config"))?;
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.train.seed = seed;
        if let Some(cv) = &mut self.cv {
            cv.seed = seed;
        }
        Ok(seed)
    }

    pub fn cv_options(&self, stratify_default: bool) -> CvOptions {
        self.cv.clone().unwrap_or(CvOptions {
            seed: self.seed.unwrap_or_default(),
            stratify: stratify_default,
            ..CvOptions::default()
        })
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            synth: self.synth.clone(),
            cv: self.cv_options(false),
            train: TrainConfig { loss: self.bench.loss, ..self.train.clone() },
            methods: self.bench.methods.clone(),
            period_thresholds: self.bench.period_thresholds.clone(),
            period_pair: self.bench.period_pair,
        }
    }

    pub fn data_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data.clone())
            .ok_or_else(|| Failure::usage("a dataset directory is required: pass --data or set `data` in the config"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("seed = 3\n[train]\nepochs = 7\n[synth]\nnum_states = 49\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.synth.num_states, 49);
        assert!(cfg.cv.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 3\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut cfg = ExperimentConfig { cv: Some(CvOptions::default()), ..Default::default() };
        assert!(cfg.resolve_seed(None).is_err());
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.cv.as_ref().unwrap().seed), (9, 9, 9));
        assert!(!cfg.bench_config().cv.stratify);
        assert!(ExperimentConfig::default().cv_options(true).stratify);
    }
}
