//! Randomized invariants of the scoring, calibration, masking and loss code.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sefoss_core::energy::{auroc, calibrate_thresholds, free_energy, EnergyConfig};
use sefoss_core::losses::{energy_inlier_mask, energy_outlier_mask, pseudo_label_loss};
use sefoss_core::tape::Tape;
use sefoss_core::tensor::{log_sum_exp, Tensor};

/// O(n m) pair count with ties worth one half.
fn brute_force_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u128;
    for &o in ood {
        for &i in id {
            twice += if o > i {
                2
            } else if o == i {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64
}

fn logits_batch() -> impl Strategy<Value = Tensor> {
    (1usize..12, 1usize..6).prop_flat_map(|(n, c)| {
        prop::collection::vec(-8.0f64..8.0, n * c).prop_map(move |v| Tensor::new(n, c, v).unwrap())
    })
}

proptest! {
    #[test]
    fn lse_shift_covariance(row in prop::collection::vec(-20.0f64..20.0, 1..12), c in -20.0f64..20.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&row) - c).abs() < 1e-12);
        prop_assert!((free_energy(&shifted, 1.0) - (free_energy(&row, 1.0) - c)).abs() < 1e-12);
    }

    #[test]
    fn lse_sandwich(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&row);
        prop_assert!(max <= l);
        prop_assert!(l <= max + (row.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn auroc_matches_pair_count_continuous(
        id in prop::collection::vec(-5.0f64..5.0, 1..100),
        ood in prop::collection::vec(-5.0f64..5.0, 1..100),
    ) {
        prop_assert_eq!(auroc(&id, &ood).unwrap(), brute_force_auroc(&id, &ood));
    }

    #[test]
    fn auroc_matches_pair_count_with_ties(
        id in prop::collection::vec(0i32..4, 1..100),
        ood in prop::collection::vec(0i32..4, 1..100),
    ) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        prop_assert_eq!(auroc(&id, &ood).unwrap(), brute_force_auroc(&id, &ood));
    }

    #[test]
    fn auroc_invariant_under_increasing_transform(
        id in prop::collection::vec(-3.0f64..3.0, 1..50),
        ood in prop::collection::vec(-3.0f64..3.0, 1..50),
    ) {
        let t = |v: &[f64]| v.iter().map(|x| x.exp() * 2.0 + 1.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&t(&id), &t(&ood)).unwrap());
    }

    #[test]
    fn calibration_is_permutation_invariant(
        scores in prop::collection::vec(-30.0f64..5.0, 4..60),
        seed in any::<u64>(),
    ) {
        let cfg = EnergyConfig::default();
        let base = calibrate_thresholds(&scores, &cfg).unwrap();
        let mut shuffled = scores.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(base, calibrate_thresholds(&shuffled, &cfg).unwrap());
        prop_assert!(base.tau_id <= base.tau_ood && base.tau_ood <= base.m_ood);
    }

    #[test]
    fn mask_counts_are_monotone(logits in logits_batch(), lo in -15.0f64..0.0, width in 0.1f64..15.0) {
        let grid: Vec<f64> = (0..50).map(|i| lo + width * i as f64 / 49.0).collect();
        let inliers: Vec<usize> = grid
            .iter()
            .map(|&t| energy_inlier_mask(&logits, t, 1.0).iter().filter(|&&b| b).count())
            .collect();
        let outliers: Vec<usize> = grid
            .iter()
            .map(|&t| energy_outlier_mask(&logits, t, 1.0).iter().filter(|&&b| b).count())
            .collect();
        // Thresholds ascend along the grid.
        prop_assert!(inliers.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(outliers.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pseudo_label_loss_ignores_strong_row_shifts(
        (weak, strong) in (1usize..10, 2usize..6).prop_flat_map(|(n, c)| {
            let t = move || prop::collection::vec(-5.0f64..5.0, n * c)
                .prop_map(move |v| Tensor::new(n, c, v).unwrap());
            (t(), t())
        }),
        shifts in prop::collection::vec(-10.0f64..10.0, 10),
        tau in -6.0f64..0.0,
    ) {
        let loss = |q: Tensor| {
            let mut tape = Tape::new();
            let q = tape.param(q).unwrap();
            let (l, n) = pseudo_label_loss(&mut tape, &weak, q, tau, 1.0).unwrap();
            (tape.value(l).item().unwrap(), n)
        };
        let mut shifted = strong.clone();
        for r in 0..shifted.rows() {
            for c in 0..shifted.cols() {
                shifted.set(r, c, strong.get(r, c) + shifts[r]);
            }
        }
        let (a, na) = loss(strong);
        let (b, nb) = loss(shifted);
        prop_assert_eq!(na, nb);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}
