//! The synthetic comparison protocol: every model kind under one set of folds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::eval::{
    c_index, kfold_cv, kfold_cv_features, period_stratified_improvement, CvOptions, FoldReport, PeriodBucketReport,
};
use crate::synth::{generate, reference_grids, SynthConfig, SynthDataset};
use crate::train::{LossKind, ModelKind, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    /// Grid with the generating number of segments.
    CtrDTrue,
    /// One segment fewer per dimension.
    CtrDMinus,
    /// One segment more per dimension.
    CtrDPlus,
    CtrK,
    CtrN,
    Static,
    /// Predictor fed the generating representation, squared loss.
    Oracle,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 7] = [
        BenchMethod::CtrDTrue,
        BenchMethod::CtrDMinus,
        BenchMethod::CtrDPlus,
        BenchMethod::CtrK,
        BenchMethod::CtrN,
        BenchMethod::Static,
        BenchMethod::Oracle,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            BenchMethod::CtrDTrue => "CTR-D-True",
            BenchMethod::CtrDMinus => "CTR-D-Minus",
            BenchMethod::CtrDPlus => "CTR-D-Plus",
            BenchMethod::CtrK => "CTR-K",
            BenchMethod::CtrN => "CTR-N",
            BenchMethod::Static => "Static",
            BenchMethod::Oracle => "Oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub cv: CvOptions,
    /// Shared training settings; the model kind and grid are set per method. The synthetic
    /// labels are uncensored, so the default loss is squared error.
    pub train: TrainConfig,
    pub methods: Vec<BenchMethod>,
    /// Minimum observation periods for the stratified comparison.
    pub period_thresholds: Vec<f64>,
    /// Methods compared in the stratified report, as (improved, baseline).
    pub period_pair: (BenchMethod, BenchMethod),
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            cv: CvOptions::default(),
            train: TrainConfig { loss: LossKind::Squared, ..TrainConfig::default() },
            methods: BenchMethod::ALL.to_vec(),
            period_thresholds: vec![0.0, 3.0, 4.0, 5.0],
            period_pair: (BenchMethod::CtrN, BenchMethod::Static),
        }
    }
}

impl BenchConfig {
    /// Training config for one method.
    pub fn method_config(&self, method: BenchMethod) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        let grid_index = match method {
            BenchMethod::CtrDTrue => Some(0),
            BenchMethod::CtrDMinus => Some(1),
            BenchMethod::CtrDPlus => Some(2),
            _ => None,
        };
        if let Some(i) = grid_index {
            let grids = reference_grids(self.synth.num_states, self.synth.dim)?;
            cfg.model = ModelKind::CtrD;
            cfg.grid.segments_per_dim = grids[i].segments_per_dim()[0];
            cfg.grid.range = Some((-1.0, 1.0));
        }
        match method {
            BenchMethod::CtrK => cfg.model = ModelKind::CtrK,
            BenchMethod::CtrN => cfg.model = ModelKind::CtrN,
            BenchMethod::Static => cfg.model = ModelKind::Static,
            BenchMethod::Oracle => {
                cfg.model = ModelKind::Static;
                cfg.loss = LossKind::Squared;
            }
            _ => {}
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: BenchMethod,
    pub report: FoldReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    /// C-index of the noise-free targets against the labels.
    pub noise_free_c_index: f64,
    pub results: Vec<MethodResult>,
    pub period: Option<PeriodBucketReport>,
}

impl BenchReport {
    pub fn result(&self, method: BenchMethod) -> Option<&FoldReport> {
        self.results.iter().find(|r| r.method == method).map(|r| &r.report)
    }
}

/// Wall-clock seconds per fold, keyed by method label. Kept apart from the report so the report
/// is reproducible byte for byte.
pub type Timings = BTreeMap<String, Vec<f64>>;

pub fn run_bench(config: &BenchConfig) -> Result<(BenchReport, Timings)> {
    let synth = generate(&config.synth)?;
    bench_on(&synth, config)
}

/// Runs the protocol on an already generated dataset.
pub fn bench_on(synth: &SynthDataset, config: &BenchConfig) -> Result<(BenchReport, Timings)> {
    if config.methods.is_empty() {
        return Err(validation("no methods to benchmark"));
    }
    let labels = synth.dataset.labels();
    let mut results = Vec::new();
    let mut timings = Timings::new();
    for &method in &config.methods {
        let cfg = config.method_config(method)?;
        log::info!("bench: {}", method.label());
        let report = if method == BenchMethod::Oracle {
            kfold_cv_features(&synth.true_ctr()?, &labels, method.label(), &cfg, &config.cv)?
        } else {
            kfold_cv(&synth.dataset, method.label(), &cfg.candidates(), &config.cv)?
        };
        timings.insert(method.label().to_string(), report.folds.iter().map(|f| f.wall_clock_secs).collect());
        results.push(MethodResult { method, report });
    }
    let (a, b) = config.period_pair;
    let find = |m: BenchMethod| results.iter().find(|r| r.method == m).map(|r| &r.report);
    let period = match (find(a), find(b), config.period_thresholds.is_empty()) {
        (Some(ra), Some(rb), false) => {
            Some(period_stratified_improvement(ra, rb, &synth.dataset, &config.period_thresholds)?)
        }
        _ => None,
    };
    let report = BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        noise_free_c_index: c_index(&synth.targets, &labels)?,
        results,
        period,
    };
    Ok((report, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        let mut cfg = BenchConfig::default();
        cfg.synth.records = 60;
        cfg.cv.k = 2;
        cfg.train.epochs = 2;
        cfg.train.num_bases = 10;
        cfg.train.num_states = 8;
        cfg.train.state_hidden = vec![8];
        cfg.train.predictor_hidden = 8;
        cfg.train.gamma_grid = vec![0.1, 1.0];
        cfg
    }

    #[test]
    fn method_configs() {
        let cfg = BenchConfig::default();
        let seg = |m| cfg.method_config(m).unwrap().grid.segments_per_dim;
        assert_eq!((seg(BenchMethod::CtrDTrue), seg(BenchMethod::CtrDMinus), seg(BenchMethod::CtrDPlus)), (5, 4, 6));
        assert_eq!(cfg.method_config(BenchMethod::Oracle).unwrap().loss, LossKind::Squared);
        assert_eq!(cfg.method_config(BenchMethod::CtrK).unwrap().candidates().len(), 5);
    }

    #[test]
    fn tiny_bench_has_every_method() {
        let (report, timings) = run_bench(&tiny()).unwrap();
        assert_eq!(report.results.len(), 7);
        assert_eq!(timings.len(), 7);
        for r in &report.results {
            assert_eq!(r.report.folds.len(), 2);
            assert!((0.0..=1.0).contains(&r.report.mean));
        }
        assert!(report.period.is_some());
    }
}
