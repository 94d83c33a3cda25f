//! Synthetic benchmark with a known generating representation.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctr::{compute_ctr, DecayParameter, ObservationSequence, SegmentGrid, StateFunction};
use crate::data::{Dataset, Record, SurvivalLabel};
use crate::error::{validation, Result};
use crate::nn::Pass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub records: usize,
    pub sequence_len: usize,
    pub dim: usize,
    pub num_states: usize,
    /// Variance of the Gaussian label noise.
    pub noise_variance: f64,
    /// Standard deviation of the Gaussian weight profile over bin centers.
    pub weight_width: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            records: 1000,
            sequence_len: 10,
            dim: 2,
            num_states: 25,
            noise_variance: 0.1,
            weight_width: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Segments per dimension, `K^(1/D)`, when that is an integer.
    pub fn segments_per_dim(&self) -> Result<usize> {
        segments_for(self.num_states, self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records == 0 || self.sequence_len == 0 || self.dim == 0 {
            return Err(validation("record count, sequence length and dimension must be positive"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(validation(format!("noise variance {} must be finite and non-negative", self.noise_variance)));
        }
        if !(self.weight_width > 0.0) {
            return Err(validation("weight width must be positive"));
        }
        self.segments_per_dim().map(|_| ())
    }
}

fn segments_for(k: usize, dim: usize) -> Result<usize> {
    if k == 0 || dim == 0 {
        return Err(validation("state count and dimension must be positive"));
    }
    let root = (k as f64).powf(1.0 / dim as f64).round() as usize;
    for r in [root.saturating_sub(1), root, root + 1] {
        if r > 0 && r.checked_pow(dim as u32) == Some(k) {
            return Ok(r);
        }
    }
    Err(validation(format!("{k} states is not a perfect power of dimension {dim}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub grid: SegmentGrid,
    pub weights: Vec<f64>,
    /// Noise-free targets `w . z` per record.
    pub targets: Vec<f64>,
}

impl SynthDataset {
    /// The generating representation of every record, one row per record.
    pub fn true_ctr(&self) -> Result<Array2<f64>> {
        let state = StateFunction::Discrete { grid: self.grid.clone() };
        let decay = DecayParameter::none();
        let k = self.grid.num_states();
        let mut out = Array2::zeros((self.dataset.len(), k));
        for (i, r) in self.dataset.records().iter().enumerate() {
            let z = compute_ctr(&r.sequence, &state, &decay, Pass::Eval)?;
            out.row_mut(i).assign(&Array1::from(z.into_values()));
        }
        Ok(out)
    }
}

/// Isotropic Gaussian profile over the bin centers, peaked at their centroid.
pub fn gaussian_weights(grid: &SegmentGrid, width: f64) -> Vec<f64> {
    let centers = grid.centers();
    let centroid = centers.mean_axis(ndarray::Axis(0)).expect("non-empty grid");
    centers
        .rows()
        .into_iter()
        .map(|c| {
            let sq: f64 = c.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum();
            (-sq / (2.0 * width * width)).exp()
        })
        .collect()
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let segments = config.segments_per_dim()?;
    let grid = SegmentGrid::equally_spaced(config.dim, segments, -1.0, 1.0)?;
    let weights = gaussian_weights(&grid, config.weight_width);
    let state = StateFunction::Discrete { grid: grid.clone() };
    let decay = DecayParameter::none();
    let noise = Normal::new(0.0, config.noise_variance.sqrt()).map_err(|e| validation(e.to_string()))?;
    let width = (config.records - 1).to_string().len();

    let mut records = Vec::with_capacity(config.records);
    let mut targets = Vec::with_capacity(config.records);
    for i in 0..config.records {
        let mut rng = record_rng(config.seed, i);
        let x = Array2::from_shape_simple_fn((config.sequence_len, config.dim), || rng.random_range(-1.0..1.0));
        let durations: Vec<f64> = (0..config.sequence_len)
            .map(|_| loop {
                let d: f64 = rng.random();
                if d > 0.0 {
                    break d;
                }
            })
            .collect();
        let seq = ObservationSequence::from_durations(format!("r{i:0width$}"), durations, x)?;
        let z = compute_ctr(&seq, &state, &decay, Pass::Eval)?;
        let target: f64 = z.values().iter().zip(&weights).map(|(a, b)| a * b).sum();
        // event times must be positive; redraw the rare noise sample that would break that
        let y = loop {
            let y = target + noise.sample(&mut rng);
            if y > 0.0 {
                break y;
            }
        };
        records.push(Record { sequence: seq, label: SurvivalLabel::event(y)? });
        targets.push(target);
    }
    Ok(SynthDataset { config: config.clone(), dataset: Dataset::new(records)?, grid, weights, targets })
}

/// Equally spaced grids over `[-1, 1]^D` with `K_d`, `K_d - 1`, and `K_d + 1` segments per
/// dimension.
pub fn reference_grids(num_states: usize, dim: usize) -> Result<[SegmentGrid; 3]> {
    let kd = segments_for(num_states, dim)?;
    if kd <= 1 {
        return Err(validation(format!("{kd} segments per dimension leaves no coarser grid")));
    }
    Ok([
        SegmentGrid::equally_spaced(dim, kd, -1.0, 1.0)?,
        SegmentGrid::equally_spaced(dim, kd - 1, -1.0, 1.0)?,
        SegmentGrid::equally_spaced(dim, kd + 1, -1.0, 1.0)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { records: 50, seed, ..SynthConfig::default() }
    }

    #[test]
    fn defaults_shape() {
        let s = generate(&SynthConfig::default()).unwrap();
        assert_eq!(s.dataset.len(), 1000);
        assert!(s.dataset.records().iter().all(|r| r.sequence.len() == 10 && r.sequence.dim() == 2));
        assert!(s.dataset.labels().iter().all(|l| !l.censored && l.event_time.is_finite()));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = serde_json::to_string(&generate(&small(7)).unwrap()).unwrap();
        let b = serde_json::to_string(&generate(&small(7)).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate(&small(8)).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn residual_matches_noise_model() {
        let s = generate(&SynthConfig::default()).unwrap();
        let n = s.targets.len() as f64;
        let res: Vec<f64> = s.dataset.labels().iter().zip(&s.targets).map(|(l, t)| l.event_time - t).collect();
        let mean = res.iter().sum::<f64>() / n;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 4.0 * (0.1 / n).sqrt(), "mean {mean}");
        assert!((var - 0.1).abs() <= 0.02, "variance {var}");
    }

    #[test]
    fn ranges_and_reproducible_targets() {
        let s = generate(&small(3)).unwrap();
        for r in s.dataset.records() {
            assert!(r.sequence.observations().iter().all(|v| (-1.0..1.0).contains(v)));
            assert!(r.sequence.raw_durations().iter().all(|d| *d > 0.0 && *d < 1.0));
        }
        let z = s.true_ctr().unwrap();
        for (row, t) in z.rows().into_iter().zip(&s.targets) {
            let again: f64 = row.iter().zip(&s.weights).map(|(a, b)| a * b).sum();
            assert!((again - t).abs() <= 1e-12);
        }
    }

    #[test]
    fn weights_are_centrally_symmetric() {
        for k in [25, 36, 49, 100] {
            let cfg = SynthConfig { num_states: k, ..SynthConfig::default() };
            let grid = SegmentGrid::equally_spaced(2, cfg.segments_per_dim().unwrap(), -1.0, 1.0).unwrap();
            let w = gaussian_weights(&grid, 1.0);
            for i in 0..w.len() {
                assert!((w[i] - w[w.len() - 1 - i]).abs() < 1e-15);
            }
            let peak = w.iter().cloned().fold(0.0, f64::max);
            assert!(peak <= 1.0);
        }
    }

    #[test]
    fn reference_grid_segments() {
        let g = reference_grids(25, 2).unwrap();
        let segs: Vec<usize> = g.iter().map(|g| g.segments_per_dim()[0]).collect();
        assert_eq!(segs, vec![5, 4, 6]);
        let g = reference_grids(49, 2).unwrap();
        let segs: Vec<usize> = g.iter().map(|g| g.segments_per_dim()[0]).collect();
        assert_eq!(segs, vec![7, 6, 8]);
        assert!(reference_grids(1, 2).is_err());
        assert!(reference_grids(26, 2).is_err());
        assert!(generate(&SynthConfig { num_states: 30, ..SynthConfig::default() }).is_err());
    }

    #[test]
    fn every_point_has_one_state_in_each_reference_grid() {
        let s = generate(&small(11)).unwrap();
        let grids = reference_grids(25, 2).unwrap();
        for r in s.dataset.records() {
            for x in r.sequence.observations().rows() {
                for g in &grids {
                    let onehot = crate::ctr::discrete_state(x, g).unwrap();
                    assert_eq!(onehot.sum(), 1.0);
                }
            }
        }
    }
}
