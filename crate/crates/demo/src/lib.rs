//! Browser bindings: one synthetic sequence, its stay-time representation under a
//! discrete or kernel state map, and the best C-index reachable at a given noise level.

use ctr_core::ctr::{compute_ctr, DecayParameter, KernelBasisSet, StateFunction};
use ctr_core::eval::c_index;
use ctr_core::nn::Pass;
use ctr_core::synth::{generate, SynthConfig, SynthDataset};
use wasm_bindgen::prelude::*;

fn one_sequence(seed: u32, len: usize, states: usize) -> ctr_core::Result<SynthDataset> {
    generate(&SynthConfig {
        records: 1,
        sequence_len: len,
        num_states: states,
        seed: seed as u64,
        ..SynthConfig::default()
    })
}

/// Rows of `[t, x0, x1]`, flattened.
pub fn sequence_rows(seed: u32, len: usize) -> ctr_core::Result<Vec<f64>> {
    let synth = one_sequence(seed, len, 25)?;
    let seq = &synth.dataset.records()[0].sequence;
    let mut out = Vec::with_capacity(seq.len() * 3);
    for (t, x) in seq.timestamps().iter().zip(seq.observations().rows()) {
        out.push(*t);
        out.extend(x.iter());
    }
    Ok(out)
}

/// Representation over a `sqrt(K) x sqrt(K)` grid; kernel bases sit at the bin centers.
pub fn representation_of(
    seed: u32,
    len: usize,
    states: usize,
    kernel: bool,
    gamma: f64,
    lambda: f64,
) -> ctr_core::Result<Vec<f64>> {
    let synth = one_sequence(seed, len, states)?;
    let state = if kernel {
        StateFunction::Kernel { basis: KernelBasisSet::new(synth.grid.centers(), gamma)? }
    } else {
        StateFunction::Discrete { grid: synth.grid.clone() }
    };
    let decay = DecayParameter::from_lambda(lambda, false)?;
    Ok(compute_ctr(&synth.dataset.records()[0].sequence, &state, &decay, Pass::Eval)?.into_values())
}

/// C-index of the noise-free targets against the noisy labels.
pub fn ceiling(seed: u32, records: usize, noise_variance: f64) -> ctr_core::Result<f64> {
    let synth = generate(&SynthConfig { records, noise_variance, seed: seed as u64, ..SynthConfig::default() })?;
    c_index(&synth.targets, &synth.dataset.labels())
}

fn js(e: ctr_core::CtrError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn sequence(seed: u32, len: usize) -> Result<Vec<f64>, JsError> {
    sequence_rows(seed, len).map_err(js)
}

#[wasm_bindgen]
pub fn representation(
    seed: u32,
    len: usize,
    states: usize,
    kernel: bool,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, JsError> {
    representation_of(seed, len, states, kernel, gamma, lambda).map_err(js)
}

#[wasm_bindgen]
pub fn noise_ceiling(seed: u32, records: usize, noise_variance: f64) -> Result<f64, JsError> {
    ceiling(seed, records, noise_variance).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_mass_equals_period() {
        let rows = sequence_rows(3, 12).unwrap();
        let period = rows[rows.len() - 3];
        let z = representation_of(3, 12, 25, false, 1.0, 1.0).unwrap();
        assert_eq!(z.len(), 25);
        assert!((z.iter().sum::<f64>() - period).abs() < 1e-12);
    }

    #[test]
    fn decay_shrinks_mass() {
        let full: f64 = representation_of(1, 10, 16, true, 2.0, 1.0).unwrap().iter().sum();
        let decayed: f64 = representation_of(1, 10, 16, true, 2.0, 0.5).unwrap().iter().sum();
        assert!(decayed < full);
    }

    #[test]
    fn ceiling_falls_with_noise() {
        let quiet = ceiling(0, 300, 0.001).unwrap();
        let loud = ceiling(0, 300, 1.0).unwrap();
        assert!(quiet > loud && quiet > 0.95);
    }

    #[test]
    fn bad_states_rejected() {
        assert!(representation_of(0, 5, 26, false, 1.0, 1.0).is_err());
    }
}
