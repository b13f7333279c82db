use dgfusion::losskit::check::{
    compare_with_oracles, outlier_invariance_violations, random_panoptic, seam_map, seam_suite,
    tau_count_mismatch, tau_monotonicity_violations,
};
use dgfusion::losskit::{
    kept_count, loss_cond, loss_log_l1, loss_seg, oracle, panoptic_boundary_weights,
    semantic_boundary_weights, tau_filter, ResidualMap,
};
use dgfusion::scenegen::{ConditionLabel, SparseDepthMap};
use diffmath::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-12;

#[test]
fn every_loss_matches_its_oracle() {
    let r = compare_with_oracles(100, 17).unwrap();
    assert_eq!(r.boundary_mismatches, 0);
    assert!(r.max_deviation() <= ORACLE_TOL, "{r:?}");
}

#[test]
fn tau_keeps_exactly_ceil_fraction() {
    assert_eq!(tau_count_mismatch(1000, 3).unwrap(), None);
}

#[test]
fn filtered_loss_grows_with_tau() {
    assert_eq!(tau_monotonicity_violations(50, 5).unwrap(), 0);
}

#[test]
fn dropped_residuals_can_be_arbitrarily_large() {
    assert_eq!(outlier_invariance_violations(50, 9).unwrap(), 0);
}

#[test]
fn instance_seams_split_panoptic_from_semantic() {
    let (failed, total) = seam_suite(200, 21).unwrap();
    assert_eq!(failed, 0, "{total:?}");
}

#[test]
fn masks_agree_without_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut s = random_panoptic(&mut rng, 20, 24, 6);
        for (c, i) in s.class_id.iter().zip(s.instance_id.iter_mut()) {
            if *i != 0 {
                *i = *c + 1;
            }
        }
        for k in [1, 3, 5] {
            assert_eq!(
                panoptic_boundary_weights(&s, k).unwrap(),
                semantic_boundary_weights(&s, k).unwrap()
            );
        }
    }
}

#[test]
fn seam_is_zero_only_in_panoptic_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = seam_map(&mut rng, 24, 24);
    let pan = panoptic_boundary_weights(&s, 3).unwrap();
    let sem = semantic_boundary_weights(&s, 3).unwrap();
    let zeros = |v: &[u8]| v.iter().filter(|&&x| x == 0).count();
    assert!(zeros(&pan.w_x) + zeros(&pan.w_y) > zeros(&sem.w_x) + zeros(&sem.w_y));
}

#[test]
fn log_l1_hand_example_with_outlier() {
    // Residuals ln 2 at four pixels and ln 40 at one; tau = 0.8 keeps four.
    let pred = Tensor::new(vec![1, 5], vec![2.0; 5]).unwrap();
    let gt = SparseDepthMap {
        depth: Tensor::new(vec![1, 5], vec![1.0, 4.0, 1.0, 80.0, 4.0]).unwrap(),
        valid: vec![true; 5],
    };
    let mut t = Tape::new();
    let p = t.constant(pred);
    let l = loss_log_l1(&mut t, p, &gt, 0.8, 1.0, 80.0).unwrap();
    assert_eq!(l.n_kept, 4);
    assert!((t.value(l.loss).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn seg_and_cond_ignore_void_and_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_panoptic(&mut rng, 9, 11, 4);
    let logits = Tensor::from_fn(&[4, 9, 11], |i| ((i * 37) % 11) as f64 * 0.3 - 1.5);
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let seg = loss_seg(&mut t, l, &s).unwrap();
    assert!((t.value(seg).item() - oracle::seg_ce(logits.data(), 4, &s)).abs() < 1e-12);

    let cl = Tensor::from_fn(&[ConditionLabel::COUNT], |i| i as f64 * 0.1);
    let c = t.constant(cl.clone());
    let cond = loss_cond(&mut t, c, ConditionLabel::from_index(3)).unwrap();
    assert!((t.value(cond).item() - oracle::cond_ce(cl.data(), 3)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kept_count_is_ceiling(t in 1usize..=100, n in 1usize..5000) {
        let tau = t as f64 / 100.0;
        prop_assert_eq!(kept_count(tau, n), (t * n).div_ceil(100));
    }

    #[test]
    fn filter_keeps_the_smallest(
        vals in prop::collection::vec(0.0f64..10.0, 1..200),
        tau in 0.01f64..=1.0,
    ) {
        let n = vals.len();
        let map = ResidualMap { r: Tensor::new(vec![n], vals.clone()).unwrap(), valid: vec![true; n] };
        let mask = tau_filter(&map, tau).unwrap();
        let kept: Vec<f64> = vals.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        let dropped: Vec<f64> = vals.iter().zip(&mask).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
        prop_assert_eq!(kept.len(), kept_count(tau, n));
        let max_kept = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(dropped.iter().all(|&d| d >= max_kept));
    }

    #[test]
    fn filter_ignores_invalid_pixels(
        vals in prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..100),
        tau in 0.05f64..=1.0,
    ) {
        prop_assume!(vals.iter().any(|v| v.1));
        let n = vals.len();
        let map = ResidualMap {
            r: Tensor::new(vec![n], vals.iter().map(|v| v.0).collect()).unwrap(),
            valid: vals.iter().map(|v| v.1).collect(),
        };
        let mask = tau_filter(&map, tau).unwrap();
        let n_valid = map.valid.iter().filter(|&&v| v).count();
        prop_assert!(mask.iter().zip(&map.valid).all(|(&m, &v)| v || !m));
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), kept_count(tau, n_valid));
    }

    #[test]
    fn boundary_masks_are_binary_and_shrink_with_k(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_panoptic(&mut rng, 12, 14, 5);
        let a = panoptic_boundary_weights(&s, 1).unwrap();
        let b = panoptic_boundary_weights(&s, 3).unwrap();
        prop_assert_eq!(a.w_x.len(), 12 * 13);
        prop_assert_eq!(a.w_y.len(), 11 * 14);
        for (x, y) in a.w_x.iter().zip(&b.w_x).chain(a.w_y.iter().zip(&b.w_y)) {
            prop_assert!(*x <= 1 && *y <= *x);
        }
    }
}
