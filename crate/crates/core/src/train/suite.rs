use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{initial_pipeline, pipeline_grad_check, LossKind, ModelKind, TrainConfig};
use crate::data::{Dataset, Record, SurvivalLabel};
use crate::error::Result;
use crate::nn::{grad_check, Activation, CheckMode, FdOptions, GradReport, Mlp, MlpSpec};
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub seed: u64,
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub checks: Vec<SuiteCheck>,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(|c| c.report.passes(self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max)
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Eight synthetic records, every third one marked censored so the ranking term sees both kinds.
fn micro_dataset(seed: u64) -> Result<Dataset> {
    let synth = generate(&SynthConfig { records: 8, seed, ..SynthConfig::default() })?;
    let records = synth
        .dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Record { sequence: r.sequence.clone(), label: SurvivalLabel::new(r.label.event_time, i % 3 == 2)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

/// Gradient verification on the default network shapes, in deterministic mode (evaluation mode
/// or replayed dropout masks), for every seed:
/// the predictor alone, the state network alone, and the full featurize-predict-loss pipeline
/// for each model kind.
pub fn gradient_suite(seeds: &[u64], base: &TrainConfig, opts: FdOptions, tolerance: f64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let replay = CheckMode::ReplayedMasks { seed };

        let f_spec = MlpSpec::new(vec![25, base.predictor_hidden, 1], Activation::Identity)
            .with_batch_norm(base.batch_norm)
            .with_dropout(base.dropout);
        let f = Mlp::new(&f_spec, &mut rng)?;
        let x = normal_matrix(16, 25, &mut rng);
        let y = normal_matrix(16, 1, &mut rng);
        let squared = |out: &Array2<f64>| {
            let r = out - &y;
            let n = r.len() as f64;
            (r.mapv(|v| v * v).sum() / n, r.mapv(|v| 2.0 * v / n))
        };
        for (name, mode) in [("predictor/eval", CheckMode::Eval), ("predictor/replayed-masks", replay)] {
            checks.push(SuiteCheck { name: name.into(), seed, report: grad_check(&f, &x, &squared, mode, opts)? });
        }

        let mut widths = vec![2];
        widths.extend(&base.state_hidden);
        widths.push(base.num_states);
        let g_spec =
            MlpSpec::new(widths, Activation::Softmax).with_batch_norm(base.batch_norm).with_dropout(base.dropout);
        let g = Mlp::new(&g_spec, &mut rng)?;
        let obs = normal_matrix(20, 2, &mut rng);
        let w = normal_matrix(20, base.num_states, &mut rng);
        let linear = |out: &Array2<f64>| ((out * &w).sum(), w.clone());
        checks.push(SuiteCheck {
            name: "state-network/replayed-masks".into(),
            seed,
            report: grad_check(&g, &obs, &linear, replay, opts)?,
        });

        let data = micro_dataset(seed)?;
        for model in [ModelKind::CtrN, ModelKind::CtrD, ModelKind::CtrK, ModelKind::Static] {
            let cfg = TrainConfig {
                model,
                seed,
                decay_init: 0.9,
                decay_trainable: true,
                num_bases: base.num_bases.min(20),
                ..base.clone()
            };
            let p = initial_pipeline(&data, &cfg)?;
            let report = pipeline_grad_check(&p, &data, LossKind::Combined, replay, opts)?;
            checks.push(SuiteCheck { name: format!("{}/end-to-end", model.label()), seed, report });
        }
    }
    Ok(SuiteReport { tolerance, checks })
}
