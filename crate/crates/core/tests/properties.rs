use ctr_core::ctr::{
    compute_ctr, stay_times, DecayParameter, KernelBasisSet, ObservationSequence, SegmentGrid, StateFunction,
};
use ctr_core::data::SurvivalLabel;
use ctr_core::eval::c_index;
use ctr_core::nn::Pass;
use ctr_core::train::{admissible_pairs, combined_loss};
use ndarray::Array2;
use proptest::prelude::*;

fn sequence() -> impl Strategy<Value = (Vec<f64>, Vec<(f64, f64)>)> {
    (1usize..25).prop_flat_map(|m| {
        (prop::collection::vec(0.01f64..3.0, m), prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), m))
    })
}

fn build(durations: &[f64], xs: &[(f64, f64)]) -> ObservationSequence {
    let x = Array2::from_shape_fn((xs.len(), 2), |(i, j)| if j == 0 { xs[i].0 } else { xs[i].1 });
    ObservationSequence::from_durations("p", durations.to_vec(), x).unwrap()
}

fn labels() -> impl Strategy<Value = (Vec<f64>, Vec<SurvivalLabel>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec((1u32..12, any::<bool>()), n)
                .prop_map(|v| v.into_iter().map(|(t, c)| SurvivalLabel::new(t as f64, c).unwrap()).collect()),
        )
    })
}

proptest! {
    #[test]
    fn kernel_mass_matches_decayed_durations((d, xs) in sequence(), lambda in 0.3f64..=1.0, log_gamma in -2.0f64..2.0) {
        let seq = build(&d, &xs);
        let decay = DecayParameter::from_lambda(lambda, false).unwrap();
        let bases = Array2::from_shape_fn((7, 2), |(i, j)| (i as f64 - 3.0) / 3.0 * if j == 0 { 1.0 } else { -0.5 });
        let f = StateFunction::Kernel { basis: KernelBasisSet::new(bases, 10f64.powf(log_gamma)).unwrap() };
        let z = compute_ctr(&seq, &f, &decay, Pass::Eval).unwrap();
        let mass: f64 = stay_times(&seq, &decay).iter().sum();
        prop_assert!((z.total() - mass).abs() <= 1e-9 * mass);
    }

    #[test]
    fn decay_never_adds_mass((d, xs) in sequence(), lambda in 0.3f64..=1.0) {
        let seq = build(&d, &xs);
        let grid = StateFunction::Discrete { grid: SegmentGrid::equally_spaced(2, 3, -1.0, 1.0).unwrap() };
        let full = compute_ctr(&seq, &grid, &DecayParameter::none(), Pass::Eval).unwrap();
        let decayed = compute_ctr(&seq, &grid, &DecayParameter::from_lambda(lambda, false).unwrap(), Pass::Eval).unwrap();
        for (a, b) in decayed.values().iter().zip(full.values()) {
            prop_assert!(*a <= *b * (1.0 + 1e-12));
        }
    }

    #[test]
    fn negated_predictions_mirror_c_index((preds, labels) in labels()) {
        let neg: Vec<f64> = preds.iter().map(|p| -p).collect();
        if let (Ok(a), Ok(b)) = (c_index(&preds, &labels), c_index(&neg, &labels)) {
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn c_index_ignores_monotone_transforms((preds, labels) in labels()) {
        let squashed: Vec<f64> = preds.iter().map(|p| p.exp()).collect();
        if let Ok(a) = c_index(&preds, &labels) {
            prop_assert_eq!(a, c_index(&squashed, &labels).unwrap());
        }
    }

    #[test]
    fn combined_loss_gradient_matches_differences((preds, labels) in labels()) {
        prop_assume!(labels.iter().any(|l| !l.censored));
        let pairs = admissible_pairs(&labels);
        let out = combined_loss(&preds, &labels, &pairs).unwrap();
        let h = 1e-6;
        for i in 0..preds.len() {
            let mut p = preds.clone();
            p[i] += h;
            let up = combined_loss(&p, &labels, &pairs).unwrap().value;
            p[i] -= 2.0 * h;
            let down = combined_loss(&p, &labels, &pairs).unwrap().value;
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - out.grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "entry {}: {} vs {}", i, fd, out.grad[i]);
        }
    }
}
