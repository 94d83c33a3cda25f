//! Concordance index, k-fold cross-validation, and period-stratified comparisons.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SurvivalLabel};
use crate::error::{validation, CtrError, Result};
use crate::train::{hyper_search, split_validation, train_predictor, TrainConfig};

/// Pair counts behind a concordance index. A pair `(n, l)` is admissible when `n` is
/// uncensored and `y_n < y_l`; `l` may be censored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied: u64,
    pub admissible: u64,
}

impl ConcordanceCounts {
    /// Prediction ties count one half.
    pub fn index(&self) -> Result<f64> {
        if self.admissible == 0 {
            return Err(CtrError::Undefined("no admissible pairs for the concordance index".into()));
        }
        Ok((2 * self.concordant + self.tied) as f64 / (2 * self.admissible) as f64)
    }
}

/// Fenwick tree over prediction ranks.
struct RankCounter {
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Concordance counts in `O(N log N)`.
pub fn concordance_counts(preds: &[f64], labels: &[SurvivalLabel]) -> Result<ConcordanceCounts> {
    if preds.len() != labels.len() {
        return Err(validation(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(validation("non-finite prediction"));
    }
    let n = preds.len();
    let mut sorted: Vec<f64> = preds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |p: f64| sorted.partition_point(|&v| v < p);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| labels[b].event_time.total_cmp(&labels[a].event_time));

    let mut counter = RankCounter::new(sorted.len());
    let mut inserted = 0_u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let y = labels[order[start]].event_time;
        let end = start + order[start..].iter().take_while(|&&i| labels[i].event_time == y).count();
        for &i in &order[start..end] {
            if labels[i].censored {
                continue;
            }
            let r = rank(preds[i]);
            let at_or_below = counter.below(r + 1);
            let below = counter.below(r);
            counts.concordant += inserted - at_or_below;
            counts.tied += at_or_below - below;
            counts.admissible += inserted;
        }
        for &i in &order[start..end] {
            counter.add(rank(preds[i]));
            inserted += 1;
        }
        start = end;
    }
    Ok(counts)
}

/// Fraction of admissible pairs ordered consistently (`pred_n < pred_l`), ties counting one half.
pub fn c_index(preds: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    concordance_counts(preds, labels)?.index()
}

/// Sample mean and standard error (sample std / sqrt(n)); the error is zero for a single value.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Seeded shuffle followed by a contiguous split into `k` folds whose sizes differ by at most
/// one. With `strata`, each stratum is shuffled and split separately so every fold receives a
/// proportional share.
pub fn fold_assignments(n: usize, k: usize, seed: u64, strata: Option<&[bool]>) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(validation(format!("k = {k}: at least two folds are required")));
    }
    if n < k {
        return Err(validation(format!("cannot split {n} records into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match strata {
        Some(flags) => {
            if flags.len() != n {
                return Err(validation("strata length does not match record count"));
            }
            let a: Vec<usize> = (0..n).filter(|&i| !flags[i]).collect();
            let b: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
            vec![a, b]
        }
        None => vec![(0..n).collect()],
    };
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        let len = group.len();
        // rotate which folds take the remainder so strata do not pile onto fold 0
        let mut start = 0;
        for f in 0..k {
            let fold = (f + offset) % k;
            let size = len / k + usize::from(f < len % k);
            folds[fold].extend_from_slice(&group[start..start + size]);
            start += size;
        }
        offset += len % k;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub test_predictions: Vec<f64>,
    /// `None` when the fold had no admissible pairs and was excluded from aggregation.
    pub c_index: Option<f64>,
    pub chosen_candidate: usize,
    pub chosen_config: TrainConfig,
    pub validation_scores: Vec<f64>,
    /// Not serialized, so saved reports stay reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub mean: f64,
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub stderr: f64,
    pub warnings: Vec<String>,
}

impl FoldReport {
    pub fn scores(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.c_index).collect()
    }

    fn aggregate(&mut self) {
        let (mean, stderr) = mean_stderr(&self.scores());
        self.mean = mean;
        self.stderr = stderr;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Stratify folds by censoring status.
    pub stratify: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { k: 5, seed: 0, validation_fraction: 0.2, stratify: false }
    }
}

/// What one fold's model selection produced.
struct FoldFit {
    test_predictions: Vec<f64>,
    chosen_candidate: usize,
    validation_scores: Vec<f64>,
}

/// Shared fold loop: `fit(train, valid, test)` receives dataset indices and returns test
/// predictions in `test` order.
fn cv_loop(
    labels: &[SurvivalLabel],
    method: &str,
    candidates: &[TrainConfig],
    opts: &CvOptions,
    mut fit: impl FnMut(&[usize], &[usize], &[usize]) -> Result<FoldFit>,
) -> Result<FoldReport> {
    if candidates.is_empty() {
        return Err(crate::error::config("empty hyperparameter grid"));
    }
    let n = labels.len();
    let strata: Option<Vec<bool>> = opts.stratify.then(|| labels.iter().map(|l| l.censored).collect());
    let folds = fold_assignments(n, opts.k, opts.seed, strata.as_deref())?;
    let mut report = FoldReport {
        method: method.to_string(),
        k: opts.k,
        seed: opts.seed,
        folds: Vec::with_capacity(opts.k),
        mean: f64::NAN,
        stderr: f64::NAN,
        warnings: Vec::new(),
    };
    for (f, test_idx) in folds.iter().enumerate() {
        let started = Instant::now();
        let rest: Vec<usize> = (0..n).filter(|i| test_idx.binary_search(i).is_err()).collect();
        let (tr, va) = split_validation(rest.len(), opts.validation_fraction, opts.seed.wrapping_add(1000 + f as u64))?;
        let tr: Vec<usize> = tr.iter().map(|&i| rest[i]).collect();
        let va: Vec<usize> = va.iter().map(|&i| rest[i]).collect();
        let fitted = fit(&tr, &va, test_idx)?;
        let test_labels: Vec<SurvivalLabel> = test_idx.iter().map(|&i| labels[i]).collect();
        let c = match c_index(&fitted.test_predictions, &test_labels) {
            Ok(c) => Some(c),
            Err(CtrError::Undefined(_)) => {
                let msg = format!("fold {f}: no admissible pairs, excluded from aggregation");
                log::warn!("{method}: {msg}");
                report.warnings.push(msg);
                None
            }
            Err(e) => return Err(e),
        };
        log::info!("{method}: fold {f} c-index {c:?}");
        report.folds.push(FoldResult {
            fold: f,
            test_indices: test_idx.clone(),
            test_predictions: fitted.test_predictions,
            c_index: c,
            chosen_candidate: fitted.chosen_candidate,
            chosen_config: candidates[fitted.chosen_candidate].clone(),
            validation_scores: fitted.validation_scores,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }
    report.aggregate();
    Ok(report)
}

/// k-fold cross-validation: for each fold, a validation split of the remaining records selects
/// among `candidates`, then the chosen model is scored on the fold.
pub fn kfold_cv(dataset: &Dataset, method: &str, candidates: &[TrainConfig], opts: &CvOptions) -> Result<FoldReport> {
    cv_loop(&dataset.labels(), method, candidates, opts, |tr, va, te| {
        let search = hyper_search(&dataset.subset(tr), &dataset.subset(va), candidates)?;
        Ok(FoldFit {
            test_predictions: search.model.predict(&dataset.subset(te))?,
            chosen_candidate: search.best_index,
            validation_scores: search.scores,
        })
    })
}

/// Cross-validation of a predictor trained directly on fixed feature rows, with the same folds
/// and validation splits as [`kfold_cv`].
pub fn kfold_cv_features(
    features: &Array2<f64>,
    labels: &[SurvivalLabel],
    method: &str,
    config: &TrainConfig,
    opts: &CvOptions,
) -> Result<FoldReport> {
    if features.nrows() != labels.len() {
        return Err(validation("feature rows and labels differ in length"));
    }
    let pick = |idx: &[usize]| (features.select(Axis(0), idx), idx.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    cv_loop(labels, method, std::slice::from_ref(config), opts, |tr, va, te| {
        let (xt, yt) = pick(tr);
        let (xv, yv) = pick(va);
        let model = train_predictor(&xt, &yt, &xv, &yv, config)?;
        Ok(FoldFit {
            test_predictions: model.predict(&features.select(Axis(0), te))?,
            chosen_candidate: 0,
            validation_scores: vec![model.best_validation_c_index],
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodBucket {
    pub threshold: f64,
    pub folds_used: usize,
    pub records: usize,
    pub mean_improvement: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodBucketReport {
    pub method_a: String,
    pub method_b: String,
    pub thresholds: Vec<f64>,
    pub buckets: Vec<PeriodBucket>,
    pub warnings: Vec<String>,
}

/// Per threshold, the C-index of `a` minus that of `b` on test records whose observation period
/// is at least the threshold, averaged across folds with its standard error.
pub fn period_stratified_improvement(
    a: &FoldReport,
    b: &FoldReport,
    dataset: &Dataset,
    thresholds: &[f64],
) -> Result<PeriodBucketReport> {
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(validation("thresholds must be strictly increasing"));
    }
    if a.folds.len() != b.folds.len() || a.folds.iter().zip(&b.folds).any(|(x, y)| x.test_indices != y.test_indices) {
        return Err(validation("both methods must be evaluated on identical folds"));
    }
    let periods: Vec<f64> = dataset.records().iter().map(|r| r.sequence.observation_period()).collect();
    let mut report = PeriodBucketReport {
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        thresholds: thresholds.to_vec(),
        buckets: Vec::new(),
        warnings: Vec::new(),
    };
    for &tau in thresholds {
        let mut diffs = Vec::new();
        let mut records = 0;
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            let keep: Vec<usize> = (0..fa.test_indices.len())
                .filter(|&j| {
                    let idx = fa.test_indices[j];
                    idx < periods.len() && periods[idx] >= tau
                })
                .collect();
            if fa.test_indices.iter().any(|&i| i >= periods.len()) {
                return Err(validation("fold indices exceed the dataset"));
            }
            let labels: Vec<SurvivalLabel> =
                keep.iter().map(|&j| dataset.records()[fa.test_indices[j]].label).collect();
            let pa: Vec<f64> = keep.iter().map(|&j| fa.test_predictions[j]).collect();
            let pb: Vec<f64> = keep.iter().map(|&j| fb.test_predictions[j]).collect();
            match (c_index(&pa, &labels), c_index(&pb, &labels)) {
                (Ok(ca), Ok(cb)) => {
                    diffs.push(ca - cb);
                    records += keep.len();
                }
                (Err(CtrError::Undefined(_)), _) | (_, Err(CtrError::Undefined(_))) => {}
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        if diffs.is_empty() {
            let msg = format!("threshold {tau}: empty bucket omitted");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        let (mean, stderr) = mean_stderr(&diffs);
        report.buckets.push(PeriodBucket {
            threshold: tau,
            folds_used: diffs.len(),
            records,
            mean_improvement: mean,
            stderr,
        });
    }
    Ok(report)
}
