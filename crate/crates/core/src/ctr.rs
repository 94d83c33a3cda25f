//! Cumulative stay-time representation.
//!
//! A record's observations `x^m` at timestamps `t^m` are mapped to
//! `z = sum_m d^m * s(x^m)`, where `d^m = lambda^(t^M - t^m) * (t^m - t^(m-1))` is the decayed
//! stay time (`t^0 = 0`) and `s` is a state function returning a weight vector that sums to one.
//! Three state functions are provided: a one-hot segment grid, normalized RBF affinities to a
//! set of bases, and a softmax network.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, CtrError, Result};
use crate::nn::{Activation, Mlp, Pass};

/// One record's timestamped observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    record_id: String,
    timestamps: Vec<f64>,
    observations: Array2<f64>,
    demographics: Option<Vec<f64>>,
    durations_override: Option<Vec<f64>>,
}

impl ObservationSequence {
    pub fn new(
        record_id: impl Into<String>,
        timestamps: Vec<f64>,
        observations: Array2<f64>,
        demographics: Option<Vec<f64>>,
        durations_override: Option<Vec<f64>>,
    ) -> Result<Self> {
        let seq = Self {
            record_id: record_id.into(),
            timestamps,
            observations: observations.as_standard_layout().into_owned(),
            demographics,
            durations_override,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Builds a sequence from stay times alone; timestamps are the running sums of the durations.
    pub fn from_durations(
        record_id: impl Into<String>,
        durations: Vec<f64>,
        observations: Array2<f64>,
    ) -> Result<Self> {
        let mut t = 0.0;
        let timestamps = durations
            .iter()
            .map(|d| {
                t += d;
                t
            })
            .collect();
        Self::new(record_id, timestamps, observations, None, Some(durations))
    }

    pub fn with_demographics(mut self, demographics: Vec<f64>) -> Result<Self> {
        self.demographics = Some(demographics);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let m = self.timestamps.len();
        let id = &self.record_id;
        if m == 0 {
            return Err(validation(format!("record {id}: at least one observation is required")));
        }
        if self.observations.nrows() != m {
            return Err(validation(format!(
                "record {id}: {} observation rows for {m} timestamps",
                self.observations.nrows()
            )));
        }
        if self.observations.ncols() == 0 {
            return Err(validation(format!("record {id}: observations have no columns")));
        }
        if self.observations.iter().any(|v| !v.is_finite()) {
            return Err(validation(format!("record {id}: non-finite observation value")));
        }
        if self.timestamps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(validation(format!("record {id}: timestamps must be finite and nonnegative")));
        }
        if let Some(pos) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(validation(format!("record {id}: timestamps not strictly increasing at position {}", pos + 1)));
        }
        if let Some(d) = &self.durations_override {
            if d.len() != m {
                return Err(validation(format!("record {id}: {} durations for {m} observations", d.len())));
            }
            if d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(validation(format!("record {id}: durations must be positive")));
            }
        }
        if let Some(demo) = &self.demographics {
            if demo.iter().any(|v| !v.is_finite()) {
                return Err(validation(format!("record {id}: non-finite demographic value")));
            }
        }
        Ok(())
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observations.ncols()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn observations(&self) -> &Array2<f64> {
        &self.observations
    }

    pub fn demographics(&self) -> Option<&[f64]> {
        self.demographics.as_deref()
    }

    pub fn durations_override(&self) -> Option<&[f64]> {
        self.durations_override.as_deref()
    }

    /// Undecayed stay times: the override durations, or gaps between timestamps with `t^0 = 0`.
    pub fn raw_durations(&self) -> Vec<f64> {
        match &self.durations_override {
            Some(d) => d.clone(),
            None => {
                let mut prev = 0.0;
                self.timestamps
                    .iter()
                    .map(|&t| {
                        let gap = t - prev;
                        prev = t;
                        gap
                    })
                    .collect()
            }
        }
    }

    /// Span from first to last observation.
    pub fn observation_period(&self) -> f64 {
        self.timestamps[self.len() - 1] - self.timestamps[0]
    }
}

/// Decay rate `lambda = exp(-softplus(raw))`, always in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParameter {
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub raw: f64,
    pub trainable: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DecayParameter {
    /// `lambda = 1` exactly (raw = -inf), not trainable.
    pub fn none() -> Self {
        Self { raw: f64::NEG_INFINITY, trainable: false }
    }

    pub fn from_lambda(lambda: f64, trainable: bool) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(validation(format!("decay rate {lambda} not in (0, 1]")));
        }
        if lambda == 1.0 {
            return Ok(Self { raw: f64::NEG_INFINITY, trainable });
        }
        // softplus(raw) = -ln(lambda)  =>  raw = ln(exp(-ln lambda) - 1)
        let raw = (-lambda.ln()).exp_m1().ln();
        Ok(Self { raw, trainable })
    }

    pub fn lambda(&self) -> f64 {
        (-softplus(self.raw)).exp()
    }

    /// `d lambda-exponent / d raw`: derivative of `ln(lambda)` with respect to `raw`.
    pub fn dlog_lambda_draw(&self) -> f64 {
        -sigmoid(self.raw)
    }
}

/// Decayed stay times `d^m`.
pub fn stay_times(seq: &ObservationSequence, decay: &DecayParameter) -> Vec<f64> {
    stay_times_with_grad(seq, decay).0
}

/// Stay times and their derivatives with respect to the raw decay parameter.
pub fn stay_times_with_grad(seq: &ObservationSequence, decay: &DecayParameter) -> (Vec<f64>, Vec<f64>) {
    let lambda = decay.lambda();
    let dlog = decay.dlog_lambda_draw();
    let t = seq.timestamps();
    let last = t[t.len() - 1];
    let gaps = seq.raw_durations();
    let mut d = Vec::with_capacity(gaps.len());
    let mut dd = Vec::with_capacity(gaps.len());
    for (gap, &tm) in gaps.iter().zip(t) {
        let age = last - tm;
        let value = if age == 0.0 { *gap } else { lambda.powf(age) * gap };
        d.push(value);
        dd.push(value * age * dlog);
    }
    (d, dd)
}

/// What `discrete_state` does with values outside the declared grid range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfRange {
    #[default]
    Reject,
    Clamp,
}

/// Per-dimension half-open value segments `[lo, hi)`; the last segment in each
/// dimension also includes its upper boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentGrid {
    boundaries: Vec<Vec<f64>>,
    #[serde(default)]
    out_of_range: OutOfRange,
}

impl SegmentGrid {
    pub fn new(boundaries: Vec<Vec<f64>>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(validation("a grid needs at least one dimension"));
        }
        for (d, b) in boundaries.iter().enumerate() {
            if b.len() < 2 {
                return Err(validation(format!("dimension {d}: at least two boundaries are required")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(validation(format!("dimension {d}: non-finite boundary")));
            }
            if b.windows(2).any(|w| w[1] <= w[0]) {
                return Err(validation(format!("dimension {d}: boundaries must be sorted without duplicates")));
            }
        }
        Ok(Self { boundaries, out_of_range: OutOfRange::Reject })
    }

    /// `segments` equal-width segments over `[lo, hi]` in each of `dim` dimensions.
    pub fn equally_spaced(dim: usize, segments: usize, lo: f64, hi: f64) -> Result<Self> {
        if segments == 0 || !(hi > lo) {
            return Err(validation(format!("cannot split [{lo}, {hi}] into {segments} segments")));
        }
        let width = (hi - lo) / segments as f64;
        let row: Vec<f64> = (0..=segments).map(|i| if i == segments { hi } else { lo + width * i as f64 }).collect();
        Self::new(vec![row; dim])
    }

    pub fn with_out_of_range(mut self, policy: OutOfRange) -> Self {
        self.out_of_range = policy;
        self
    }

    pub fn out_of_range(&self) -> OutOfRange {
        self.out_of_range
    }

    pub fn boundaries(&self) -> &[Vec<f64>] {
        &self.boundaries
    }

    pub fn dim(&self) -> usize {
        self.boundaries.len()
    }

    pub fn segments_per_dim(&self) -> Vec<usize> {
        self.boundaries.iter().map(|b| b.len() - 1).collect()
    }

    pub fn num_states(&self) -> usize {
        self.segments_per_dim().iter().product()
    }

    /// Segment midpoints for every state, `K x D`; state index is row-major over dimensions.
    pub fn centers(&self) -> Array2<f64> {
        let k = self.num_states();
        let mut out = Array2::zeros((k, self.dim()));
        for idx in 0..k {
            for (d, seg) in self.unflatten(idx).into_iter().enumerate() {
                let b = &self.boundaries[d];
                out[[idx, d]] = 0.5 * (b[seg] + b[seg + 1]);
            }
        }
        out
    }

    fn unflatten(&self, mut idx: usize) -> Vec<usize> {
        let counts = self.segments_per_dim();
        let mut out = vec![0; counts.len()];
        for d in (0..counts.len()).rev() {
            out[d] = idx % counts[d];
            idx /= counts[d];
        }
        out
    }

    /// Index of the state containing `x`.
    pub fn state_index(&self, x: ArrayView1<f64>) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(config(format!("observation width {} does not match grid dimension {}", x.len(), self.dim())));
        }
        let mut idx = 0;
        for (d, b) in self.boundaries.iter().enumerate() {
            let (lo, hi) = (b[0], b[b.len() - 1]);
            let mut v = x[d];
            if !(lo..=hi).contains(&v) {
                match self.out_of_range {
                    OutOfRange::Reject => return Err(CtrError::OutOfRange { dim: d, value: v, lo, hi }),
                    OutOfRange::Clamp if v.is_nan() => return Err(CtrError::OutOfRange { dim: d, value: v, lo, hi }),
                    OutOfRange::Clamp => v = v.clamp(lo, hi),
                }
            }
            let segments = b.len() - 1;
            // number of boundaries <= v, minus one; the top boundary folds into the last segment
            let seg = (b.partition_point(|&edge| edge <= v) - 1).min(segments - 1);
            idx = idx * segments + seg;
        }
        Ok(idx)
    }
}

/// One-hot state vector for `x` on the grid.
pub fn discrete_state(x: ArrayView1<f64>, grid: &SegmentGrid) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(grid.num_states());
    out[grid.state_index(x)?] = 1.0;
    Ok(out)
}

/// RBF bases and bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBasisSet {
    bases: Array2<f64>,
    gamma: f64,
}

impl KernelBasisSet {
    pub fn new(bases: Array2<f64>, gamma: f64) -> Result<Self> {
        if bases.nrows() == 0 || bases.ncols() == 0 {
            return Err(validation("a kernel basis set needs at least one basis of positive width"));
        }
        if bases.iter().any(|v| !v.is_finite()) {
            return Err(validation("non-finite basis entry"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(validation(format!("kernel bandwidth {gamma} must be positive")));
        }
        Ok(Self { bases: bases.as_standard_layout().into_owned(), gamma })
    }

    pub fn bases(&self) -> &Array2<f64> {
        &self.bases
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_states(&self) -> usize {
        self.bases.nrows()
    }

    pub fn dim(&self) -> usize {
        self.bases.ncols()
    }
}

/// Normalized RBF affinities `exp(-gamma |x - b_k|^2) / Z`.
pub fn kernel_state(x: ArrayView1<f64>, basis: &KernelBasisSet) -> Result<Array1<f64>> {
    if x.len() != basis.dim() {
        return Err(config(format!("observation width {} does not match basis width {}", x.len(), basis.dim())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(validation("non-finite observation"));
    }
    let sq: Array1<f64> = basis
        .bases
        .rows()
        .into_iter()
        .map(|b| b.iter().zip(x.iter()).map(|(bi, xi)| (xi - bi) * (xi - bi)).sum::<f64>())
        .collect();
    // shifting by the nearest basis cancels in the normalization
    let nearest = sq.fold(f64::INFINITY, |m, &v| m.min(v));
    let mut w = sq.mapv(|v| (-basis.gamma * (v - nearest)).exp());
    let z = w.sum();
    w /= z;
    Ok(w)
}

/// Softmax output of the state network for one observation.
pub fn neural_state(x: ArrayView1<f64>, g: &Mlp, pass: Pass<'_>) -> Result<Array1<f64>> {
    check_state_network(g)?;
    let row = x.to_owned().insert_axis(Axis(0));
    let (out, _) = g.forward(&row, pass)?;
    Ok(out.row(0).to_owned())
}

pub(crate) fn check_state_network(g: &Mlp) -> Result<()> {
    match g.layers.last() {
        Some(l) if l.activation == Activation::Softmax => Ok(()),
        _ => Err(config("state network must end in a softmax layer")),
    }
}

/// Maps an observation to a weight vector over `K` states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateFunction {
    Discrete { grid: SegmentGrid },
    Kernel { basis: KernelBasisSet },
    Neural { network: Mlp },
}

impl StateFunction {
    pub fn num_states(&self) -> usize {
        match self {
            StateFunction::Discrete { grid } => grid.num_states(),
            StateFunction::Kernel { basis } => basis.num_states(),
            StateFunction::Neural { network } => network.output_width(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            StateFunction::Discrete { grid } => grid.dim(),
            StateFunction::Kernel { basis } => basis.dim(),
            StateFunction::Neural { network } => network.input_width(),
        }
    }

    /// State weights for every row of `observations` (`M x D` in, `M x K` out).
    pub fn states(&self, observations: &Array2<f64>, pass: Pass<'_>) -> Result<Array2<f64>> {
        if observations.ncols() != self.input_dim() {
            return Err(config(format!(
                "observation width {} does not match state function input width {}",
                observations.ncols(),
                self.input_dim()
            )));
        }
        match self {
            StateFunction::Discrete { grid } => {
                let mut out = Array2::zeros((observations.nrows(), grid.num_states()));
                for (m, x) in observations.rows().into_iter().enumerate() {
                    out[[m, grid.state_index(x)?]] = 1.0;
                }
                Ok(out)
            }
            StateFunction::Kernel { basis } => {
                let mut out = Array2::zeros((observations.nrows(), basis.num_states()));
                for (m, x) in observations.rows().into_iter().enumerate() {
                    out.row_mut(m).assign(&kernel_state(x, basis)?);
                }
                Ok(out)
            }
            StateFunction::Neural { network } => {
                check_state_network(network)?;
                Ok(network.forward(observations, pass)?.0)
            }
        }
    }
}

/// The `K`-dimensional cumulative stay-time vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrVector {
    values: Vec<f64>,
}

impl CtrVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(validation("stay-time representation entries must be finite and nonnegative"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Divided by its total; the zero vector is returned unchanged.
    pub fn normalized(&self) -> CtrVector {
        let total = self.total();
        if total > 0.0 {
            CtrVector { values: self.values.iter().map(|v| v / total).collect() }
        } else {
            self.clone()
        }
    }
}

/// `z = sum_m d^m s(x^m)` given precomputed stay times and `M x K` state weights.
pub fn accumulate(durations: &[f64], states: &Array2<f64>) -> Array1<f64> {
    let mut z = Array1::zeros(states.ncols());
    for (d, s) in durations.iter().zip(states.rows()) {
        z.scaled_add(*d, &s);
    }
    z
}

pub fn compute_ctr(
    seq: &ObservationSequence,
    state_fn: &StateFunction,
    decay: &DecayParameter,
    pass: Pass<'_>,
) -> Result<CtrVector> {
    let d = stay_times(seq, decay);
    let states = state_fn.states(seq.observations(), pass)?;
    CtrVector::new(accumulate(&d, &states).to_vec())
}

/// `k` observation rows pooled across `sequences`, drawn without replacement.
pub fn sample_bases(sequences: &[&ObservationSequence], k: usize, seed: u64) -> Result<Array2<f64>> {
    let dim = sequences.first().map(|s| s.dim()).ok_or_else(|| validation("no sequences to sample bases from"))?;
    if sequences.iter().any(|s| s.dim() != dim) {
        return Err(validation("sequences have differing observation widths"));
    }
    let pool: usize = sequences.iter().map(|s| s.len()).sum();
    if k == 0 || pool < k {
        return Err(validation(format!("cannot sample {k} bases from {pool} observation rows")));
    }
    let mut rows = Vec::with_capacity(pool);
    for s in sequences {
        rows.extend(s.observations().rows());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, pool, k);
    let mut out = Array2::zeros((k, dim));
    for (i, idx) in picked.iter().enumerate() {
        out.row_mut(i).assign(&rows[idx]);
    }
    Ok(out)
}
