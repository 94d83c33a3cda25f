//! Losses, end-to-end training of the predictor (and, for the neural variant, the state network
//! and decay rate), and validation-driven hyperparameter selection.

mod features;
mod loss;
mod pipeline;
mod suite;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use features::{quantile_sorted, static_features, Standardizer, STATIC_QUANTILES, STATS_PER_COLUMN};
pub use loss::{admissible_pairs, combined_loss, squared_loss, LossOutput};
pub use pipeline::{Featurizer, Pipeline, PipelineGrads};
pub use suite::{gradient_suite, SuiteCheck, SuiteReport};

use crate::ctr::{sample_bases, DecayParameter, KernelBasisSet, OutOfRange, SegmentGrid, StateFunction};
use crate::data::{Dataset, SurvivalLabel};
use crate::error::{config, validation, CtrError, Result};
use crate::eval::c_index;
use crate::nn::gradcheck::finite_difference_report;
use crate::nn::{Activation, AdamConfig, AdamState, CheckMode, FdOptions, GradReport, Mlp, MlpSpec, Pass};
use pipeline::Prepared;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One-hot segment-grid states.
    CtrD,
    /// Normalized RBF affinities to sampled bases.
    CtrK,
    /// Softmax state network trained end to end.
    CtrN,
    /// Per-column summary statistics; no stay-time representation.
    Static,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::CtrD => "CTR-D",
            ModelKind::CtrK => "CTR-K",
            ModelKind::CtrN => "CTR-N",
            ModelKind::Static => "Static",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error on uncensored records.
    Squared,
    /// Squared error plus pairwise ranking over censoring-admissible pairs.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub segments_per_dim: usize,
    /// Value range shared by every dimension; per-dimension training min/max when absent.
    pub range: Option<(f64, f64)>,
    pub clamp: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { segments_per_dim: 5, range: Some((-1.0, 1.0)), clamp: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub decay_trainable: bool,
    pub decay_init: f64,
    pub grid: GridConfig,
    pub num_bases: usize,
    pub gamma: f64,
    /// Candidate bandwidths expanded by [`TrainConfig::candidates`] for the kernel variant.
    pub gamma_grid: Vec<f64>,
    /// Output width `K` of the state network.
    pub num_states: usize,
    pub predictor_hidden: usize,
    pub state_hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
    pub freeze_state_network: bool,
    /// z-normalize kernel/neural observations, static features, and demographics.
    pub standardize: bool,
    pub normalize_ctr: bool,
    /// Early-stopping patience in epochs on validation C-index; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::CtrN,
            loss: LossKind::Combined,
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
            decay_trainable: true,
            decay_init: 0.999,
            grid: GridConfig::default(),
            num_bases: 100,
            gamma: 1.0,
            gamma_grid: vec![1e-2, 1e-1, 1e0, 1e1, 1e2],
            num_states: 100,
            predictor_hidden: 100,
            state_hidden: vec![100, 100],
            dropout: 0.5,
            batch_norm: true,
            freeze_state_network: false,
            standardize: true,
            normalize_ctr: false,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        Self { model, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config("batch size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!("dropout rate {} not in [0, 1)", self.dropout)));
        }
        if !(self.decay_init > 0.0 && self.decay_init <= 1.0) {
            return Err(config(format!("initial decay {} not in (0, 1]", self.decay_init)));
        }
        match self.model {
            ModelKind::CtrD if self.grid.segments_per_dim == 0 => Err(config("grid needs at least one segment")),
            ModelKind::CtrK if self.num_bases == 0 || !(self.gamma > 0.0) => {
                Err(config("kernel variant needs bases and a positive bandwidth"))
            }
            ModelKind::CtrN if self.num_states == 0 => Err(config("state network needs at least one output")),
            _ => Ok(()),
        }
    }

    /// The hyperparameter grid for this model: one config per bandwidth for the kernel variant,
    /// otherwise just this config.
    pub fn candidates(&self) -> Vec<TrainConfig> {
        match self.model {
            ModelKind::CtrK if !self.gamma_grid.is_empty() => {
                self.gamma_grid.iter().map(|&gamma| TrainConfig { gamma, ..self.clone() }).collect()
            }
            _ => vec![self.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// NaN when no minibatch contributed.
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub train_loss: f64,
    pub validation_c_index: f64,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub pipeline: Pipeline,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_c_index: f64,
}

impl TrainedModel {
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        self.pipeline.predict(dataset)
    }

    /// Training history as one JSON object per line.
    pub fn history_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.history {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Independent random streams derived from one seed.
pub(crate) struct Streams {
    pub predictor_init: ChaCha8Rng,
    pub state_init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub bases_seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            predictor_init: stream(1),
            state_init: stream(2),
            shuffle: stream(3),
            dropout: stream(4),
            bases_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }
}

/// Random `fraction` of `0..n` held out for validation; returns sorted (train, validation).
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(validation(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let n_valid = (n as f64 * fraction).round() as usize;
    if n_valid == 0 || n_valid >= n {
        return Err(validation(format!("empty validation or training split from {n} records")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = idx[..n_valid].to_vec();
    let mut train = idx[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((train, valid))
}

/// Loss for one minibatch, or `None` when the batch cannot contribute.
pub(crate) fn batch_loss(kind: LossKind, preds: &[f64], labels: &[SurvivalLabel]) -> Result<Option<LossOutput>> {
    let uncensored: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].censored).collect();
    if uncensored.is_empty() {
        return Ok(None);
    }
    match kind {
        LossKind::Squared => {
            let p: Vec<f64> = uncensored.iter().map(|&i| preds[i]).collect();
            let l: Vec<SurvivalLabel> = uncensored.iter().map(|&i| labels[i]).collect();
            let sub = squared_loss(&p, &l)?;
            let mut grad = vec![0.0; preds.len()];
            for (&i, g) in uncensored.iter().zip(&sub.grad) {
                grad[i] = *g;
            }
            Ok(Some(LossOutput { grad, ..sub }))
        }
        LossKind::Combined => {
            let pairs = admissible_pairs(labels);
            combined_loss(preds, labels, &pairs).map(Some)
        }
    }
}

fn mean_uncensored(labels: &[SurvivalLabel]) -> f64 {
    let v: Vec<f64> = labels.iter().filter(|l| !l.censored).map(|l| l.event_time).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn predictor_spec(input: usize, cfg: &TrainConfig) -> MlpSpec {
    MlpSpec::new(vec![input, cfg.predictor_hidden, 1], Activation::Identity)
        .with_batch_norm(cfg.batch_norm)
        .with_dropout(cfg.dropout)
}

fn build_predictor(input: usize, cfg: &TrainConfig, labels: &[SurvivalLabel], rng: &mut ChaCha8Rng) -> Result<Mlp> {
    let mut f = Mlp::new(&predictor_spec(input, cfg), rng)?;
    // start the regression output at the label mean
    let last = f.layers.len() - 1;
    f.layers[last].bias[0] = mean_uncensored(labels);
    Ok(f)
}

fn check_validation_set(valid: &Dataset) -> Result<()> {
    if valid.is_empty() {
        return Err(validation("empty validation split"));
    }
    let labels = valid.labels();
    if admissible_pairs(&labels).is_empty() {
        return Err(validation("validation split has no admissible pairs"));
    }
    Ok(())
}

/// Builds the untrained pipeline for `cfg` from the training split.
pub fn initial_pipeline(train: &Dataset, cfg: &TrainConfig) -> Result<Pipeline> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(validation("empty training split"));
    }
    let mut streams = Streams::new(cfg.seed);
    let dim = train.dim();
    let scale_obs = cfg.standardize && matches!(cfg.model, ModelKind::CtrK | ModelKind::CtrN);
    let observation_scaler = if scale_obs {
        let rows: Vec<Vec<f64>> = train
            .records()
            .iter()
            .flat_map(|r| r.sequence.observations().rows().into_iter().map(|row| row.to_vec()).collect::<Vec<_>>())
            .collect();
        Some(Standardizer::fit(rows.iter().map(Vec::as_slice))?)
    } else {
        None
    };
    let decay = DecayParameter::from_lambda(cfg.decay_init, cfg.decay_trainable)?;
    let (featurizer, feature_scaler, width) = match cfg.model {
        ModelKind::CtrD => {
            let boundaries = match cfg.grid.range {
                Some((lo, hi)) => SegmentGrid::equally_spaced(dim, cfg.grid.segments_per_dim, lo, hi)?,
                None => {
                    let mut lo = vec![f64::INFINITY; dim];
                    let mut hi = vec![f64::NEG_INFINITY; dim];
                    for r in train.records() {
                        for row in r.sequence.observations().rows() {
                            for d in 0..dim {
                                lo[d] = lo[d].min(row[d]);
                                hi[d] = hi[d].max(row[d]);
                            }
                        }
                    }
                    let per_dim = (0..dim)
                        .map(|d| {
                            let h = if hi[d] > lo[d] { hi[d] } else { lo[d] + 1.0 };
                            SegmentGrid::equally_spaced(1, cfg.grid.segments_per_dim, lo[d], h)
                                .map(|g| g.boundaries()[0].clone())
                        })
                        .collect::<Result<Vec<_>>>()?;
                    SegmentGrid::new(per_dim)?
                }
            };
            let grid =
                boundaries.with_out_of_range(if cfg.grid.clamp { OutOfRange::Clamp } else { OutOfRange::Reject });
            let k = grid.num_states();
            (Featurizer::Ctr { state: StateFunction::Discrete { grid }, decay, normalize: cfg.normalize_ctr }, None, k)
        }
        ModelKind::CtrK => {
            let seqs = train.sequences();
            let mut bases = sample_bases(&seqs, cfg.num_bases, streams.bases_seed ^ cfg.seed)?;
            if let Some(sc) = &observation_scaler {
                for mut row in bases.rows_mut() {
                    sc.transform_in_place(row.as_slice_mut().expect("standard layout"));
                }
            }
            let basis = KernelBasisSet::new(bases, cfg.gamma)?;
            let k = basis.num_states();
            (Featurizer::Ctr { state: StateFunction::Kernel { basis }, decay, normalize: cfg.normalize_ctr }, None, k)
        }
        ModelKind::CtrN => {
            let mut widths = vec![dim];
            widths.extend(&cfg.state_hidden);
            widths.push(cfg.num_states);
            let spec =
                MlpSpec::new(widths, Activation::Softmax).with_batch_norm(cfg.batch_norm).with_dropout(cfg.dropout);
            let network = Mlp::new(&spec, &mut streams.state_init)?;
            let k = cfg.num_states;
            (Featurizer::Ctr { state: StateFunction::Neural { network }, decay, normalize: cfg.normalize_ctr }, None, k)
        }
        ModelKind::Static => {
            let feats: Vec<Vec<f64>> = train.records().iter().map(|r| static_features(&r.sequence)).collect();
            let scaler = if cfg.standardize { Some(Standardizer::fit(feats.iter().map(Vec::as_slice))?) } else { None };
            (Featurizer::Static, scaler, (dim + 1) * STATS_PER_COLUMN)
        }
    };
    let demo_dim = train.demographics_dim();
    let demographics_scaler = if demo_dim > 0 && cfg.standardize {
        Some(Standardizer::fit(train.records().iter().filter_map(|r| r.sequence.demographics()))?)
    } else {
        None
    };
    let predictor = build_predictor(width + demo_dim, cfg, &train.labels(), &mut streams.predictor_init)?;
    Ok(Pipeline { featurizer, observation_scaler, feature_scaler, demographics_scaler, predictor })
}

fn trainable_blocks(p: &mut Pipeline, train_states: bool) -> Vec<&mut [f64]> {
    let mut blocks = p.predictor.param_blocks_mut();
    if let Featurizer::Ctr { state, decay, .. } = &mut p.featurizer {
        if train_states {
            if let StateFunction::Neural { network } = state {
                blocks.extend(network.param_blocks_mut());
            }
        }
        if decay.trainable {
            blocks.push(std::slice::from_mut(&mut decay.raw));
        }
    }
    blocks
}

fn grad_blocks<'a>(g: &'a PipelineGrads, decay_grad: &'a [f64; 1], trains_decay: bool) -> Vec<&'a [f64]> {
    let mut blocks = g.predictor.blocks();
    if let Some(sg) = &g.state_network {
        blocks.extend(sg.blocks());
    }
    if trains_decay {
        blocks.push(&decay_grad[..]);
    }
    blocks
}

fn validation_score(preds: &[f64], labels: &[SurvivalLabel], epoch: usize) -> Result<f64> {
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(CtrError::Diverged { epoch, detail: "non-finite validation prediction".into() });
    }
    c_index(preds, labels)
}

fn evaluate(pipeline: &Pipeline, prepared: &[Prepared<'_>], labels: &[SurvivalLabel], epoch: usize) -> Result<f64> {
    let mut preds = Vec::with_capacity(prepared.len());
    for chunk in prepared.chunks(512) {
        let refs: Vec<&Prepared<'_>> = chunk.iter().collect();
        preds.extend(pipeline.forward_batch(&refs, Pass::Eval)?.preds);
    }
    validation_score(&preds, labels, epoch)
}

/// Trains `cfg` on `train`, keeping the parameters with the best validation C-index.
pub fn train_model(train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    check_validation_set(valid)?;
    let pipeline = initial_pipeline(train, cfg)?;
    train_pipeline(pipeline, train, valid, cfg)
}

/// Training loop for an already-built pipeline.
pub fn train_pipeline(
    mut pipeline: Pipeline,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    check_validation_set(valid)?;
    if train.len() < 2 {
        return Err(validation("training split needs at least two records"));
    }
    let mut streams = Streams::new(cfg.seed);
    let train_states = pipeline.state_network().is_some() && !cfg.freeze_state_network;
    let trains_decay = pipeline.decay().is_some_and(|d| d.trainable);
    let sizes: Vec<usize> = trainable_blocks(&mut pipeline, train_states).iter().map(|b| b.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &sizes);

    let prepared_train = pipeline.prepare(train.records(), train_states)?;
    let prepared_valid = pipeline.prepare(valid.records(), train_states)?;
    let train_labels = train.labels();
    let valid_labels = valid.labels();

    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, pipeline.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Prepared<'_>> = chunk.iter().map(|&i| &prepared_train[i]).collect();
            let labels: Vec<SurvivalLabel> = chunk.iter().map(|&i| train_labels[i]).collect();
            let fwd = pipeline.forward_batch(&batch, Pass::Train(&mut streams.dropout))?;
            let Some(loss) = batch_loss(cfg.loss, &fwd.preds, &labels)? else {
                continue;
            };
            if !loss.value.is_finite() {
                return Err(CtrError::Diverged { epoch, detail: format!("batch loss {}", loss.value) });
            }
            let grads = pipeline.backward_batch(&fwd, &loss.grad)?;
            let decay_grad = [grads.decay_raw];
            let gb = grad_blocks(&grads, &decay_grad, trains_decay);
            if gb.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
                return Err(CtrError::Diverged { epoch, detail: "non-finite gradient".into() });
            }
            pipeline.absorb_batch_stats(&fwd)?;
            adam.step(&mut trainable_blocks(&mut pipeline, train_states), &gb)?;
            loss_sum += loss.value;
            batches += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        let score = evaluate(&pipeline, &prepared_valid, &valid_labels, epoch)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_c_index: score,
            lambda: pipeline.decay().map(DecayParameter::lambda),
        });
        log::debug!("epoch {epoch}: loss {train_loss:.6} validation c-index {score:.4}");
        if score > best.0 {
            best = (score, epoch, pipeline.clone());
        }
        if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (best_score, best_epoch, best_pipeline) = best;
    Ok(TrainedModel {
        pipeline: best_pipeline,
        config: cfg.clone(),
        history,
        best_epoch,
        best_validation_c_index: best_score,
    })
}

/// A predictor trained on fixed feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub predictor: Mlp,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_c_index: f64,
}

impl FeatureModel {
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.predictor.predict(features)?.column(0).to_vec())
    }
}

/// Trains only the predictor on precomputed feature rows, using the same random streams,
/// batching, and loss as [`train_model`]. No standardization is applied.
pub fn train_predictor(
    train_x: &Array2<f64>,
    train_labels: &[SurvivalLabel],
    valid_x: &Array2<f64>,
    valid_labels: &[SurvivalLabel],
    cfg: &TrainConfig,
) -> Result<FeatureModel> {
    cfg.validate()?;
    if train_x.nrows() != train_labels.len() || valid_x.nrows() != valid_labels.len() {
        return Err(validation("feature rows and labels differ in length"));
    }
    if admissible_pairs(valid_labels).is_empty() {
        return Err(validation("validation split has no admissible pairs"));
    }
    let mut streams = Streams::new(cfg.seed);
    let mut f = build_predictor(train_x.ncols(), cfg, train_labels, &mut streams.predictor_init)?;
    let sizes: Vec<usize> = f.blocks().iter().map(|b| b.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &sizes);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, f.clone());
    let mut order: Vec<usize> = (0..train_x.nrows()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train_x.select(ndarray::Axis(0), chunk);
            let labels: Vec<SurvivalLabel> = chunk.iter().map(|&i| train_labels[i]).collect();
            let (out, cache) = f.forward(&x, Pass::Train(&mut streams.dropout))?;
            let preds = out.column(0).to_vec();
            let Some(loss) = batch_loss(cfg.loss, &preds, &labels)? else {
                continue;
            };
            if !loss.value.is_finite() {
                return Err(CtrError::Diverged { epoch, detail: format!("batch loss {}", loss.value) });
            }
            let g = Array2::from_shape_vec((loss.grad.len(), 1), loss.grad.clone())
                .map_err(|e| CtrError::Contract(e.to_string()))?;
            let (grads, _) = f.backward(&cache, &g)?;
            f.absorb_batch_stats(&cache)?;
            adam.step(&mut f.param_blocks_mut(), &grads.blocks())?;
            loss_sum += loss.value;
            batches += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        let preds = f.predict(valid_x)?.column(0).to_vec();
        let score = validation_score(&preds, valid_labels, epoch)?;
        history.push(EpochRecord { epoch, train_loss, validation_c_index: score, lambda: None });
        if score > best.0 {
            best = (score, epoch, f.clone());
        }
        if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(FeatureModel { predictor: best.2, history, best_epoch: best.1, best_validation_c_index: best.0 })
}

fn pipeline_block_names(p: &Pipeline) -> Vec<String> {
    let mut names: Vec<String> = p.predictor.block_names().into_iter().map(|n| format!("f.{n}")).collect();
    if let Some(g) = p.state_network() {
        names.extend(g.block_names().into_iter().map(|n| format!("g.{n}")));
    }
    if p.decay().is_some_and(|d| d.trainable) {
        names.push("decay.raw".into());
    }
    names
}

/// Checks the end-to-end gradient of `loss` over all of `dataset` as one batch: predictor,
/// state network, and decay rate, through the representation, against central differences.
pub fn pipeline_grad_check(
    pipeline: &Pipeline,
    dataset: &Dataset,
    loss: LossKind,
    mode: CheckMode,
    opts: FdOptions,
) -> Result<GradReport> {
    let prepared = pipeline.prepare(dataset.records(), true)?;
    let batch: Vec<&Prepared<'_>> = prepared.iter().collect();
    let labels = dataset.labels();
    let run = |p: &Pipeline| -> Result<(f64, Option<PipelineGrads>)> {
        let fwd = match mode {
            CheckMode::Eval => p.forward_batch(&batch, Pass::Eval)?,
            CheckMode::ReplayedMasks { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                p.forward_batch(&batch, Pass::Train(&mut rng))?
            }
        };
        let out =
            batch_loss(loss, &fwd.preds, &labels)?.ok_or_else(|| validation("no record contributes to the loss"))?;
        Ok((out.value, Some(p.backward_batch(&fwd, &out.grad)?)))
    };
    let (_, grads) = run(pipeline)?;
    let grads = grads.expect("gradients");
    let decay_grad = [grads.decay_raw];
    let trains_decay = pipeline.decay().is_some_and(|d| d.trainable);
    let analytic: Vec<Vec<f64>> = grad_blocks(&grads, &decay_grad, trains_decay).iter().map(|b| b.to_vec()).collect();
    let names = pipeline_block_names(pipeline);
    let mut work = pipeline.clone();
    let mut failure = None;
    let report = finite_difference_report(
        &names,
        &analytic,
        |b, i, delta| {
            let old = {
                let mut blocks = trainable_blocks(&mut work, true);
                let old = blocks[b][i];
                blocks[b][i] = old + delta;
                old
            };
            let value = match run(&work) {
                Ok((v, _)) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            };
            trainable_blocks(&mut work, true)[b][i] = old;
            value
        },
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_index: usize,
    /// Best validation C-index per candidate, in grid order.
    pub scores: Vec<f64>,
    pub model: TrainedModel,
}

/// Trains every candidate and keeps the one with the highest validation C-index; the earliest
/// candidate wins ties.
pub fn hyper_search(train: &Dataset, valid: &Dataset, candidates: &[TrainConfig]) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(config("empty hyperparameter grid"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, TrainedModel)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let model = train_model(train, valid, cand)?;
        let score = model.best_validation_c_index;
        scores.push(score);
        if best.as_ref().is_none_or(|(_, m)| score > m.best_validation_c_index) {
            best = Some((i, model));
        }
    }
    let (best_index, model) = best.expect("non-empty grid");
    Ok(SearchResult { best_index, scores, model })
}

/// Rows of `z` (plus demographics) for every record, as the predictor sees them.
pub fn featurize(model: &TrainedModel, dataset: &Dataset) -> Result<Array2<f64>> {
    model.pipeline.features(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctr::ObservationSequence;
    use crate::data::Record;
    use crate::synth::{generate, SynthConfig};
    use ndarray::array;

    fn synth_split(records: usize, seed: u64) -> (Dataset, Dataset) {
        let s = generate(&SynthConfig { records, seed, ..SynthConfig::default() }).unwrap();
        let (tr, va) = split_validation(records, 0.2, seed).unwrap();
        (s.dataset.subset(&tr), s.dataset.subset(&va))
    }

    fn small(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            loss: LossKind::Squared,
            epochs: 3,
            num_bases: 12,
            num_states: 6,
            state_hidden: vec![8],
            predictor_hidden: 8,
            ..TrainConfig::default()
        }
    }

    fn micro() -> Dataset {
        let rec = |id: &str, t: Vec<f64>, x: ndarray::Array2<f64>, y: f64, c: bool| Record {
            sequence: ObservationSequence::new(id, t, x, None, None).unwrap(),
            label: SurvivalLabel::new(y, c).unwrap(),
        };
        Dataset::new(vec![
            rec("a", vec![0.5, 1.0, 2.5], array![[0.1, -0.4], [0.7, 0.2], [-0.3, 0.9]], 2.0, false),
            rec("b", vec![1.0, 1.5], array![[-0.8, 0.5], [0.4, -0.6]], 3.5, true),
            rec("c", vec![0.2, 0.9, 1.1, 3.0], array![[0.0, 0.0], [0.3, -0.9], [-0.5, 0.5], [0.9, 0.1]], 1.2, false),
            rec("d", vec![2.0], array![[0.6, 0.6]], 4.0, false),
        ])
        .unwrap()
    }

    #[test]
    fn ctr_d_loss_decreases_over_first_epochs() {
        let (train, valid) = synth_split(1000, 0);
        let cfg = TrainConfig { epochs: 5, patience: 0, loss: LossKind::Squared, ..TrainConfig::new(ModelKind::CtrD) };
        let model = train_model(&train, &valid, &cfg).unwrap();
        let losses: Vec<f64> = model.history.iter().map(|h| h.train_loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn end_to_end_neural_gradient() {
        let data = micro();
        for seed in [0, 1, 2] {
            let cfg =
                TrainConfig { decay_init: 0.8, dropout: 0.3, seed, loss: LossKind::Combined, ..small(ModelKind::CtrN) };
            let p = initial_pipeline(&data, &cfg).unwrap();
            let report = pipeline_grad_check(
                &p,
                &data,
                LossKind::Combined,
                CheckMode::ReplayedMasks { seed },
                FdOptions::default(),
            )
            .unwrap();
            assert!(report.blocks.iter().any(|b| b.name.starts_with("g.")));
            assert!(report.blocks.iter().any(|b| b.name == "decay.raw"));
            assert!(report.passes(1e-3), "{report:?}");
            let eval =
                pipeline_grad_check(&p, &data, LossKind::Squared, CheckMode::Eval, FdOptions::default()).unwrap();
            assert!(eval.passes(1e-3), "{eval:?}");
        }
    }

    #[test]
    fn fixed_state_gradients_check() {
        let data = micro();
        for model in [ModelKind::CtrD, ModelKind::CtrK, ModelKind::Static] {
            let mut cfg = TrainConfig { decay_init: 0.7, loss: LossKind::Combined, ..small(model) };
            cfg.num_bases = 5;
            let p = initial_pipeline(&data, &cfg).unwrap();
            let report = pipeline_grad_check(
                &p,
                &data,
                LossKind::Combined,
                CheckMode::ReplayedMasks { seed: 3 },
                FdOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-3), "{model:?} {report:?}");
        }
    }

    #[test]
    fn frozen_state_network_matches_predictor_only_training() {
        let (train, valid) = synth_split(200, 4);
        let cfg = TrainConfig {
            epochs: 4,
            freeze_state_network: true,
            decay_trainable: false,
            decay_init: 0.9,
            ..small(ModelKind::CtrN)
        };
        let p = initial_pipeline(&train, &cfg).unwrap();
        let g_before = p.state_network().unwrap().clone();
        let full = train_pipeline(p.clone(), &train, &valid, &cfg).unwrap();
        assert_eq!(full.pipeline.state_network().unwrap(), &g_before);

        let f_only = train_predictor(
            &p.features(&train).unwrap(),
            &train.labels(),
            &p.features(&valid).unwrap(),
            &valid.labels(),
            &cfg,
        )
        .unwrap();
        let a: Vec<u64> = full.history.iter().map(|h| h.train_loss.to_bits()).collect();
        let b: Vec<u64> = f_only.history.iter().map(|h| h.train_loss.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(full.pipeline.predictor, f_only.predictor);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (train, valid) = synth_split(120, 2);
        let cfg = TrainConfig { loss: LossKind::Combined, ..small(ModelKind::CtrN) };
        let a = serde_json::to_string(&train_model(&train, &valid, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&train_model(&train, &valid, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn search_grid_and_ties() {
        let (train, valid) = synth_split(100, 1);
        let one = hyper_search(&train, &valid, &[small(ModelKind::CtrD)]).unwrap();
        assert_eq!(one.best_index, 0);
        assert_eq!(one.scores.len(), 1);

        let tie = hyper_search(&train, &valid, &[small(ModelKind::CtrD), small(ModelKind::CtrD)]).unwrap();
        assert_eq!(tie.scores[0], tie.scores[1]);
        assert_eq!(tie.best_index, 0);

        let grid = small(ModelKind::CtrK).candidates();
        assert_eq!(grid.iter().map(|c| c.gamma).collect::<Vec<_>>(), vec![1e-2, 1e-1, 1e0, 1e1, 1e2]);
        let res = hyper_search(&train, &valid, &grid).unwrap();
        assert_eq!(res.scores.len(), 5);
        let best = res.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.scores[res.best_index], best);
        assert!(res.scores[..res.best_index].iter().all(|s| *s < best));
        assert!(hyper_search(&train, &valid, &[]).is_err());
    }

    #[test]
    fn errors() {
        let (train, valid) = synth_split(60, 0);
        let empty = Dataset::new(vec![]).unwrap();
        assert!(matches!(train_model(&train, &empty, &small(ModelKind::CtrD)), Err(CtrError::Validation(_))));
        let bad = TrainConfig { batch_size: 1, ..small(ModelKind::CtrD) };
        assert!(matches!(train_model(&train, &valid, &bad), Err(CtrError::Config(_))));
        let mut wild = small(ModelKind::Static);
        wild.adam.learning_rate = 1e300;
        wild.batch_norm = false;
        let r = train_model(&train, &valid, &wild);
        assert!(matches!(r, Err(CtrError::Diverged { .. })), "{:?}", r.map(|m| m.history));
    }

    #[test]
    fn validation_split_sizes() {
        let (tr, va) = split_validation(800, 0.2, 9).unwrap();
        assert_eq!((tr.len(), va.len()), (640, 160));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..800).collect::<Vec<_>>());
        assert!(split_validation(3, 0.0, 0).is_err());
    }
}
