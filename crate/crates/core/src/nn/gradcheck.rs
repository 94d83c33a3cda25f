//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, Pass};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub size: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub blocks: Vec<BlockError>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < tolerance)
    }

    pub fn extend(&mut self, prefix: &str, other: GradReport) {
        for mut b in other.blocks {
            b.name = format!("{prefix}{}", b.name);
            self.blocks.push(b);
        }
    }
}

/// `|a - n| / max(|a|, |n|)`, with gradients below `1e-7` in both routes treated as agreeing
/// at the absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs()).max(1e-7);
    diff / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many randomly chosen entries per block.
    pub max_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_per_block: None, seed: 0 }
    }
}

/// Compares `analytic` against central differences of `loss_at(block, index, delta)`,
/// which must return the loss with that one parameter shifted by `delta`.
pub fn finite_difference_report<F>(
    names: &[String],
    analytic: &[Vec<f64>],
    mut loss_at: F,
    opts: FdOptions,
) -> GradReport
where
    F: FnMut(usize, usize, f64) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    for (b, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let indices: Vec<usize> = match opts.max_per_block {
            Some(cap) if cap < n => sample(&mut rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0_f64;
        for &i in &indices {
            let plus = loss_at(b, i, opts.step);
            let minus = loss_at(b, i, -opts.step);
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(grads[i], numeric));
        }
        report.blocks.push(BlockError {
            name: names.get(b).cloned().unwrap_or_else(|| format!("block{b}")),
            size: n,
            checked: indices.len(),
            max_rel_error: worst,
        });
    }
    report
}

/// Loss on the network output: returns the value and its gradient w.r.t. the output.
pub type OutputLoss<'a> = dyn Fn(&Array2<f64>) -> (f64, Array2<f64>) + 'a;

/// How the network is run while checking. Both are deterministic: `ReplayedMasks`
/// re-seeds the dropout stream on every evaluation so every pass samples the same masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckMode {
    Eval,
    ReplayedMasks { seed: u64 },
}

fn run(net: &Mlp, input: &Array2<f64>, mode: CheckMode) -> Result<(Array2<f64>, super::ForwardCache)> {
    match mode {
        CheckMode::Eval => net.forward(input, Pass::Eval),
        CheckMode::ReplayedMasks { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            net.forward(input, Pass::Train(&mut rng))
        }
    }
}

/// Per-block gradient check of a single network under an output loss.
pub fn grad_check(
    net: &Mlp,
    input: &Array2<f64>,
    loss: &OutputLoss<'_>,
    mode: CheckMode,
    opts: FdOptions,
) -> Result<GradReport> {
    let (out, cache) = run(net, input, mode)?;
    let (_, grad_out) = loss(&out);
    let (grads, _) = net.backward(&cache, &grad_out)?;
    let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
    let mut probe = net.clone();
    let names = net.block_names();
    let report = finite_difference_report(
        &names,
        &analytic,
        |b, i, delta| {
            let original = probe.param_blocks_mut()[b][i];
            probe.param_blocks_mut()[b][i] = original + delta;
            let value = run(&probe, input, mode).map(|(o, _)| loss(&o).0).unwrap_or(f64::NAN);
            probe.param_blocks_mut()[b][i] = original;
            value
        },
        opts,
    );
    Ok(report)
}

/// Gradient of the loss with respect to the network input, checked entry by entry.
pub fn input_grad_check(
    net: &Mlp,
    input: &Array2<f64>,
    loss: &OutputLoss<'_>,
    mode: CheckMode,
    step: f64,
) -> Result<f64> {
    let (out, cache) = run(net, input, mode)?;
    let (_, grad_out) = loss(&out);
    let (_, dx) = net.backward(&cache, &grad_out)?;
    let mut worst = 0.0_f64;
    let mut probe = input.clone();
    for idx in 0..input.len() {
        let (r, c) = (idx / input.ncols(), idx % input.ncols());
        let original = probe[[r, c]];
        probe[[r, c]] = original + step;
        let plus = loss(&run(net, &probe, mode)?.0).0;
        probe[[r, c]] = original - step;
        let minus = loss(&run(net, &probe, mode)?.0).0;
        probe[[r, c]] = original;
        worst = worst.max(relative_error(dx[[r, c]], (plus - minus) / (2.0 * step)));
    }
    Ok(worst)
}

/// Directional-derivative check along a random unit direction `v`:
/// `(L(θ+εv) - L(θ-εv)) / 2ε` against `<grad, v>`.
pub fn directional_check(
    net: &Mlp,
    input: &Array2<f64>,
    loss: &OutputLoss<'_>,
    mode: CheckMode,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let (out, cache) = run(net, input, mode)?;
    let (_, grad_out) = loss(&out);
    let (grads, _) = net.backward(&cache, &grad_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<Vec<f64>> =
        net.blocks().iter().map(|b| (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let norm = direction.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let analytic: f64 = grads
        .blocks()
        .iter()
        .zip(&direction)
        .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / norm;
    let shifted = |sign: f64| -> Result<f64> {
        let mut probe = net.clone();
        for (p, v) in probe.param_blocks_mut().into_iter().zip(&direction) {
            for (pj, vj) in p.iter_mut().zip(v) {
                *pj += sign * step * vj / norm;
            }
        }
        Ok(loss(&run(&probe, input, mode)?.0).0)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
    Ok(relative_error(analytic, numeric))
}
