//! Featurize -> predict, with analytic gradients for the predictor, the state network, and the
//! decay parameter.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::features::{static_features, Standardizer};
use crate::ctr::{accumulate, stay_times_with_grad, DecayParameter, ObservationSequence, StateFunction};
use crate::data::{Dataset, Record};
use crate::error::{config, CtrError, Result};
use crate::nn::{ForwardCache, Mlp, MlpGrads, Pass};

/// How a record becomes the predictor's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Featurizer {
    Ctr {
        state: StateFunction,
        decay: DecayParameter,
        /// Divide `z` by its total before the predictor.
        normalize: bool,
    },
    /// Per-column summary statistics.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub featurizer: Featurizer,
    /// Applied to observations before a kernel or neural state function.
    pub observation_scaler: Option<Standardizer>,
    /// Applied to static summary features.
    pub feature_scaler: Option<Standardizer>,
    pub demographics_scaler: Option<Standardizer>,
    pub predictor: Mlp,
}

/// Per-record inputs that do not change while training.
pub(crate) struct Prepared<'a> {
    pub sequence: &'a ObservationSequence,
    pub observations: Array2<f64>,
    /// State weights when the state function is not being trained.
    pub states: Option<Array2<f64>>,
    pub static_features: Option<Vec<f64>>,
    pub demographics: Option<Vec<f64>>,
}

pub(crate) struct BatchForward {
    pub preds: Vec<f64>,
    inputs_width: usize,
    durations: Vec<Vec<f64>>,
    duration_grads: Vec<Vec<f64>>,
    /// Row offset of each record inside `states`.
    offsets: Vec<usize>,
    /// Stacked `sum(M) x K` state weights.
    states: Option<Array2<f64>>,
    /// Raw `z` rows (before optional normalization).
    raw_ctr: Option<Array2<f64>>,
    state_cache: Option<ForwardCache>,
    predictor_cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct PipelineGrads {
    pub predictor: MlpGrads,
    pub state_network: Option<MlpGrads>,
    pub decay_raw: f64,
}

impl Pipeline {
    pub fn num_states(&self) -> Option<usize> {
        match &self.featurizer {
            Featurizer::Ctr { state, .. } => Some(state.num_states()),
            Featurizer::Static => None,
        }
    }

    pub fn decay(&self) -> Option<&DecayParameter> {
        match &self.featurizer {
            Featurizer::Ctr { decay, .. } => Some(decay),
            Featurizer::Static => None,
        }
    }

    pub fn state_network(&self) -> Option<&Mlp> {
        match &self.featurizer {
            Featurizer::Ctr { state: StateFunction::Neural { network }, .. } => Some(network),
            _ => None,
        }
    }

    pub(crate) fn state_network_mut(&mut self) -> Option<&mut Mlp> {
        match &mut self.featurizer {
            Featurizer::Ctr { state: StateFunction::Neural { network }, .. } => Some(network),
            _ => None,
        }
    }

    fn scaled_observations(&self, seq: &ObservationSequence) -> Array2<f64> {
        let mut obs = seq.observations().clone();
        if let Some(sc) = &self.observation_scaler {
            for mut row in obs.rows_mut() {
                sc.transform_in_place(row.as_slice_mut().expect("standard layout"));
            }
        }
        obs
    }

    /// `trainable_states`: leave neural states to be computed per batch.
    pub(crate) fn prepare<'a>(&self, records: &'a [Record], trainable_states: bool) -> Result<Vec<Prepared<'a>>> {
        records
            .iter()
            .map(|r| {
                let seq = &r.sequence;
                let observations = self.scaled_observations(seq);
                let (states, static_features) = match &self.featurizer {
                    Featurizer::Ctr { state: StateFunction::Neural { .. }, .. } if trainable_states => (None, None),
                    Featurizer::Ctr { state, .. } => (Some(state.states(&observations, Pass::Eval)?), None),
                    Featurizer::Static => {
                        let mut f = static_features(seq);
                        if let Some(sc) = &self.feature_scaler {
                            sc.transform_in_place(&mut f);
                        }
                        (None, Some(f))
                    }
                };
                let demographics = seq.demographics().map(|d| match &self.demographics_scaler {
                    Some(sc) => sc.transform(d),
                    None => d.to_vec(),
                });
                Ok(Prepared { sequence: seq, observations, states, static_features, demographics })
            })
            .collect()
    }

    pub(crate) fn forward_batch(&self, batch: &[&Prepared<'_>], mut pass: Pass<'_>) -> Result<BatchForward> {
        let b = batch.len();
        let demo_width = batch.first().and_then(|p| p.demographics.as_ref()).map_or(0, Vec::len);
        let mut durations = Vec::with_capacity(b);
        let mut duration_grads = Vec::with_capacity(b);
        let mut offsets = Vec::with_capacity(b);
        let (inputs, states, raw_ctr, state_cache) = match &self.featurizer {
            Featurizer::Static => {
                let width = batch[0].static_features.as_ref().map_or(0, Vec::len);
                let mut inputs = Array2::zeros((b, width + demo_width));
                for (i, p) in batch.iter().enumerate() {
                    let f = p
                        .static_features
                        .as_ref()
                        .ok_or_else(|| CtrError::Contract("missing static features".into()))?;
                    inputs.slice_mut(s![i, ..width]).assign(&Array1::from(f.clone()));
                }
                (inputs, None, None, None)
            }
            Featurizer::Ctr { state, decay, normalize } => {
                let k = state.num_states();
                let mut total_rows = 0;
                for p in batch {
                    let (d, dd) = stay_times_with_grad(p.sequence, decay);
                    offsets.push(total_rows);
                    total_rows += d.len();
                    durations.push(d);
                    duration_grads.push(dd);
                }
                let (stacked, cache) = if batch.iter().all(|p| p.states.is_some()) {
                    let mut st = Array2::zeros((total_rows, k));
                    for (p, &off) in batch.iter().zip(&offsets) {
                        let s = p.states.as_ref().expect("checked");
                        st.slice_mut(s![off..off + s.nrows(), ..]).assign(s);
                    }
                    (st, None)
                } else {
                    let network = match state {
                        StateFunction::Neural { network } => network,
                        _ => return Err(CtrError::Contract("states missing for a fixed state function".into())),
                    };
                    let mut obs = Array2::zeros((total_rows, state.input_dim()));
                    for (p, &off) in batch.iter().zip(&offsets) {
                        obs.slice_mut(s![off..off + p.observations.nrows(), ..]).assign(&p.observations);
                    }
                    let pass_g = match &mut pass {
                        Pass::Eval => Pass::Eval,
                        Pass::Train(rng) => Pass::Train(&mut **rng),
                    };
                    let (st, cache) = network.forward(&obs, pass_g)?;
                    (st, Some(cache))
                };
                let mut raw = Array2::zeros((b, k));
                let mut inputs = Array2::zeros((b, k + demo_width));
                for (i, (&off, d)) in offsets.iter().zip(&durations).enumerate() {
                    let z = accumulate(d, &stacked.slice(s![off..off + d.len(), ..]).to_owned());
                    raw.row_mut(i).assign(&z);
                    let total = z.sum();
                    if *normalize && total > 0.0 {
                        inputs.slice_mut(s![i, ..k]).assign(&(&z / total));
                    } else {
                        inputs.slice_mut(s![i, ..k]).assign(&z);
                    }
                }
                (inputs, Some(stacked), Some(raw), cache)
            }
        };
        let mut inputs = inputs;
        if demo_width > 0 {
            let base = inputs.ncols() - demo_width;
            for (i, p) in batch.iter().enumerate() {
                let d = p
                    .demographics
                    .as_ref()
                    .ok_or_else(|| CtrError::Contract("records disagree on demographics".into()))?;
                inputs.slice_mut(s![i, base..]).assign(&Array1::from(d.clone()));
            }
        }
        if inputs.ncols() != self.predictor.input_width() {
            return Err(config(format!(
                "predictor expects {} inputs, featurizer produced {}",
                self.predictor.input_width(),
                inputs.ncols()
            )));
        }
        let (out, predictor_cache) = self.predictor.forward(&inputs, pass)?;
        Ok(BatchForward {
            preds: out.column(0).to_vec(),
            inputs_width: inputs.ncols(),
            durations,
            duration_grads,
            offsets,
            states,
            raw_ctr,
            state_cache,
            predictor_cache,
        })
    }

    /// Chain rule from `d loss / d pred` back through the predictor, `z`, the stay times, and
    /// (when it was run) the state network.
    pub(crate) fn backward_batch(&self, fwd: &BatchForward, dpred: &[f64]) -> Result<PipelineGrads> {
        let grad_out =
            Array2::from_shape_vec((dpred.len(), 1), dpred.to_vec()).map_err(|e| CtrError::Contract(e.to_string()))?;
        let (predictor, dinputs) = self.predictor.backward(&fwd.predictor_cache, &grad_out)?;
        debug_assert_eq!(dinputs.ncols(), fwd.inputs_width);
        let Featurizer::Ctr { state, normalize, .. } = &self.featurizer else {
            return Ok(PipelineGrads { predictor, state_network: None, decay_raw: 0.0 });
        };
        let k = state.num_states();
        let states = fwd.states.as_ref().ok_or_else(|| CtrError::Contract("forward kept no states".into()))?;
        let raw = fwd.raw_ctr.as_ref().ok_or_else(|| CtrError::Contract("forward kept no z".into()))?;
        let mut dstates = fwd.state_cache.as_ref().map(|_| Array2::<f64>::zeros(states.raw_dim()));
        let mut decay_raw = 0.0;
        for (i, (&off, d)) in fwd.offsets.iter().zip(&fwd.durations).enumerate() {
            let mut dz = dinputs.slice(s![i, ..k]).to_owned();
            if *normalize {
                let z = raw.row(i);
                let total = z.sum();
                if total > 0.0 {
                    let zhat = &z / total;
                    let proj = dz.dot(&zhat);
                    dz = (dz - proj) / total;
                }
            }
            for (m, dm) in d.iter().enumerate() {
                let row = states.row(off + m);
                decay_raw += fwd.duration_grads[i][m] * row.dot(&dz);
                if let Some(ds) = dstates.as_mut() {
                    ds.row_mut(off + m).scaled_add(*dm, &dz);
                }
            }
        }
        let state_network = match (state, &fwd.state_cache, dstates) {
            (StateFunction::Neural { network }, Some(cache), Some(ds)) => Some(network.backward(cache, &ds)?.0),
            _ => None,
        };
        Ok(PipelineGrads { predictor, state_network, decay_raw })
    }

    pub(crate) fn absorb_batch_stats(&mut self, fwd: &BatchForward) -> Result<()> {
        self.predictor.absorb_batch_stats(&fwd.predictor_cache)?;
        if let (Some(cache), Some(net)) = (&fwd.state_cache, self.state_network_mut()) {
            net.absorb_batch_stats(cache)?;
        }
        Ok(())
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let prepared = self.prepare(dataset.records(), true)?;
        let mut preds = Vec::with_capacity(prepared.len());
        for chunk in prepared.chunks(512) {
            let refs: Vec<&Prepared<'_>> = chunk.iter().collect();
            preds.extend(self.forward_batch(&refs, Pass::Eval)?.preds);
        }
        Ok(preds)
    }

    /// Predictor inputs (representation plus demographics) in evaluation mode.
    pub fn features(&self, dataset: &Dataset) -> Result<Array2<f64>> {
        let prepared = self.prepare(dataset.records(), true)?;
        let refs: Vec<&Prepared<'_>> = prepared.iter().collect();
        if refs.is_empty() {
            return Ok(Array2::zeros((0, self.predictor.input_width())));
        }
        let fwd = self.forward_batch(&refs, Pass::Eval)?;
        let k = self.num_states();
        let demo: Vec<Vec<f64>> = prepared.iter().map(|p| p.demographics.clone().unwrap_or_default()).collect();
        let mut out = Array2::zeros((refs.len(), self.predictor.input_width()));
        for i in 0..refs.len() {
            let mut row = match (k, &fwd.raw_ctr) {
                (Some(_), Some(raw)) => {
                    let z = raw.row(i).to_owned();
                    match &self.featurizer {
                        Featurizer::Ctr { normalize: true, .. } if z.sum() > 0.0 => (&z / z.sum()).to_vec(),
                        _ => z.to_vec(),
                    }
                }
                _ => prepared[i].static_features.clone().unwrap_or_default(),
            };
            row.extend_from_slice(&demo[i]);
            out.row_mut(i).assign(&Array1::from(row));
        }
        Ok(out)
    }
}
