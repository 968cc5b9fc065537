//! Property tests over the numeric building blocks: FAMO weighting, expert
//! dropout, AUROC, percentile fusion and anomaly maps.

use mtlmad::backbone::TaskId;
use mtlmad::eval::auroc;
use mtlmad::famo::{famo_combined_loss, famo_logit_step, softmax};
use mtlmad::moe::{ExpertAssignment, ExpertDropoutMask};
use mtlmad::rng::rng_for;
use mtlmad::scoring::{
    anomaly_map, complementary_masks, fuse, percentile_rank, top_k_mean, FusionWeights,
    PercentileTables, ScoreVector,
};
use proptest::prelude::*;

fn logits(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, m)
}

fn labeled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..=max)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..6, n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_map(|(s, mut y)| {
            y[0] = 0;
            y[1] = 1;
            (s.into_iter().map(|v| f64::from(v) / 5.0).collect(), y)
        })
}

proptest! {
    #[test]
    fn softmax_lies_on_the_simplex(w in (1usize..6).prop_flat_map(logits)) {
        let p = softmax(&w);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn logit_step_ignores_a_common_rate_shift(
        (w, r) in (1usize..6).prop_flat_map(|m| (logits(m), prop::collection::vec(-1.0f64..1.0, m))),
        shift in -2.0f64..2.0,
        beta in 0.0f64..2.0,
    ) {
        let shifted: Vec<f64> = r.iter().map(|v| v + shift).collect();
        let a = famo_logit_step(&w, &r, beta);
        let b = famo_logit_step(&w, &shifted, beta);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficients_ignore_a_common_loss_scale(
        (w, l) in (1usize..6).prop_flat_map(|m| (logits(m), prop::collection::vec(1e-3f64..10.0, m))),
        scale in 1e-2f64..1e2,
    ) {
        let p = softmax(&w);
        let a = famo_combined_loss(&l, &p, 1e-8);
        let scaled: Vec<f64> = l.iter().map(|v| v * scale).collect();
        let b = famo_combined_loss(&scaled, &p, 1e-8);
        prop_assert!((a.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_never_empties_a_task(k in 1usize..16, rate in 0.0f64..1.0, seed in any::<u64>()) {
        let assignment = ExpertAssignment::new(k).unwrap();
        let mask = ExpertDropoutMask::sample(rate, &assignment, 3, &mut rng_for(seed, &[]));
        prop_assert!(mask.check(&assignment).is_ok());
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps((s, y) in labeled(40)) {
        let a = auroc(&s, &y).unwrap();
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(a, auroc(&mapped, &y).unwrap());
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        prop_assert!((auroc(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let negated: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&negated, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn percentile_rank_is_monotone(
        mut table in prop::collection::vec(-1.0f64..1.0, 1..30),
        a in -1.5f64..1.5,
        d in 0.0f64..1.0,
    ) {
        table.sort_by(f64::total_cmp);
        let lo = percentile_rank(a, &table);
        let hi = percentile_rank(a + d, &table);
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(lo <= hi);
    }

    #[test]
    fn fused_scores_stay_in_the_unit_interval(
        refs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..20),
        raw in prop::collection::vec(0.0f64..1.0, 5),
        w in prop::collection::vec(0.01f64..1.0, 5),
    ) {
        let vec_of = |v: &[f64]| {
            let mut s = ScoreVector::default();
            TaskId::ALL.iter().zip(v).for_each(|(&t, &x)| s.set(t, x));
            s
        };
        let refs: Vec<ScoreVector> = refs.iter().map(|r| vec_of(r)).collect();
        let tables = PercentileTables::build(&refs, &TaskId::ALL).unwrap();
        prop_assert!(tables.tables.values().all(|t| t.windows(2).all(|p| p[0] <= p[1])));
        let weights = FusionWeights::new(TaskId::ALL.iter().copied().zip(w).collect()).unwrap();
        let f = fuse(&vec_of(&raw), &tables, &weights).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
    }

    #[test]
    fn complementary_masks_partition(n in 4usize..300, ratio in 0.2f64..1.0, seed in any::<u64>()) {
        let masks = complementary_masks(n, ratio, seed).unwrap();
        let mut seen = vec![0u8; n];
        masks.iter().flatten().for_each(|&i| seen[i] += 1);
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = masks.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn top_k_mean_is_bounded(v in prop::collection::vec(-10.0f64..10.0, 1..50), k in 1usize..60) {
        let m = top_k_mean(&v, k);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(m <= max + 1e-12 && m >= mean - 1e-12);
    }

    #[test]
    fn anomaly_maps_stay_in_the_unit_interval(
        mim in prop::collection::vec(0.0f64..5.0, 16),
        dmx in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let map = anomaly_map(Some(&mim), Some(&dmx), 4, 4, 16, 2.0).unwrap();
        prop_assert_eq!(map.data.len(), 256);
        prop_assert!(map.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
