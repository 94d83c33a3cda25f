use serde::{Deserialize, Serialize};

use crate::ctr::ObservationSequence;
use crate::error::{validation, Result};

pub const STATIC_QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
/// Mean, standard deviation, and the five quantiles.
pub const STATS_PER_COLUMN: usize = 2 + STATIC_QUANTILES.len();

/// Quantile of sorted data by linear interpolation between order statistics at `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-column summary of the observations with the undecayed stay time appended as a
/// column: mean, population standard deviation, and the 0.1/0.25/0.5/0.75/0.9 quantiles.
/// Output length is `(D + 1) * 7`.
pub fn static_features(seq: &ObservationSequence) -> Vec<f64> {
    let obs = seq.observations();
    let durations = seq.raw_durations();
    let mut out = Vec::with_capacity((seq.dim() + 1) * STATS_PER_COLUMN);
    let mut column_stats = |col: Vec<f64>| {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = col;
        sorted.sort_by(f64::total_cmp);
        out.push(mean);
        out.push(var.sqrt());
        out.extend(STATIC_QUANTILES.iter().map(|&q| quantile_sorted(&sorted, q)));
    };
    for c in obs.columns() {
        column_stats(c.to_vec());
    }
    column_stats(durations);
    out
}

/// Per-column z-normalization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with (near) zero spread keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for row in &rows {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
            }
            if row.len() != sum.len() {
                return Err(validation("rows of differing width"));
            }
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(validation("cannot fit a standardizer on no rows"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        sumsq.resize(mean.len(), 0.0);
        for row in &rows {
            for (j, v) in row.iter().enumerate() {
                sumsq[j] += (v - mean[j]).powi(2);
            }
        }
        let std = sumsq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_in_place(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        let mut out = row.to_vec();
        self.transform_in_place(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn constant_column() {
        let s = ObservationSequence::new("a", vec![1.0, 2.0, 3.0], array![[4.0], [4.0], [4.0]], None, None).unwrap();
        let f = static_features(&s);
        assert_eq!(&f[..7], &[4.0, 0.0, 4.0, 4.0, 4.0, 4.0, 4.0]);
        // unit gaps make the stay-time column constant too
        assert_eq!(&f[7..], &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn median_interpolates() {
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert!((quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.1) - 1.3).abs() < 1e-15);
        assert_eq!(quantile_sorted(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn output_length_is_seven_per_column() {
        let s = ObservationSequence::new("a", vec![1.0, 3.0], Array2::zeros((2, 2)), None, None).unwrap();
        assert_eq!(static_features(&s).len(), 21);
    }

    #[test]
    fn standardizer_uses_fit_statistics() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let st = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(st.mean, vec![2.0, 5.0]);
        assert_eq!(st.std, vec![1.0, 1.0]);
        assert_eq!(st.transform(&[4.0, 6.0]), vec![2.0, 1.0]);
        assert!(Standardizer::fit(std::iter::empty()).is_err());
    }
}
