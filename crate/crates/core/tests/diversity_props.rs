use nsens_core::diversity::{metric_cos_dist, metric_dis, metric_prop1, metric_prop2, metric_prop_harm, pair_counts};
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

fn flip(v: &[bool]) -> Vec<bool> {
    v.iter().map(|b| !b).collect()
}

proptest! {
    #[test]
    fn count_metrics_are_symmetric_and_bounded((p, q) in pair()) {
        let c = pair_counts(&p, &q).unwrap();
        let r = pair_counts(&q, &p).unwrap();
        for f in [metric_prop1, metric_prop2, metric_prop_harm, metric_dis] {
            let v = f(&c);
            prop_assert_eq!(v, f(&r));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dis_never_exceeds_either_proportion((p, q) in pair()) {
        let c = pair_counts(&p, &q).unwrap();
        prop_assert!(metric_dis(&c) <= metric_prop1(&c) + 1e-15);
        prop_assert!(metric_dis(&c) <= metric_prop2(&c) + 1e-15);
    }

    #[test]
    fn harmonic_mean_lies_between_the_proportions((p, q) in pair()) {
        let c = pair_counts(&p, &q).unwrap();
        let (a, b, h) = (metric_prop1(&c), metric_prop2(&c), metric_prop_harm(&c));
        prop_assert!(h >= a.min(b) - 1e-15 && h <= a.max(b) + 1e-15);
    }

    /// Swapping the roles of correct and wrong exchanges the two proportions.
    #[test]
    fn complement_swaps_prop1_and_prop2((p, q) in pair()) {
        let c = pair_counts(&p, &q).unwrap();
        let f = pair_counts(&flip(&p), &flip(&q)).unwrap();
        prop_assert_eq!(metric_prop1(&c), metric_prop2(&f));
        prop_assert_eq!(metric_dis(&c), metric_dis(&f));
    }

    #[test]
    fn cosine_distance_is_symmetric_bounded_and_zero_on_self((p, q) in pair()) {
        let d = metric_cos_dist(&p, &q).unwrap();
        prop_assert_eq!(d, metric_cos_dist(&q, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(metric_cos_dist(&p, &p).unwrap(), 0.0);
    }

    /// Binary vectors with no common wrong instance are orthogonal.
    #[test]
    fn disjoint_error_sets_are_maximally_distant(p in prop::collection::vec(any::<bool>(), 1..200)) {
        prop_assume!(p.iter().any(|&b| b) && p.iter().any(|&b| !b));
        prop_assert_eq!(metric_cos_dist(&p, &flip(&p)).unwrap(), 1.0);
    }
}

#[test]
fn length_mismatch_is_rejected() {
    assert!(pair_counts(&[true], &[true, false]).is_err());
    assert!(metric_cos_dist(&[true], &[]).is_err());
    assert!(pair_counts(&[], &[]).is_err());
}
