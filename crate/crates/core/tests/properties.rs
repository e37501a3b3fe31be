//! Property tests over the verifier, loss, split and ROC arithmetic.

use ndarray::Array2;
use proptest::prelude::*;
use s2c::dataset::split_counts;
use s2c::evalkit::{BoxStats, IntervalEstimate};
use s2c::model::PredictionBatch;
use s2c::trainer::{loss_components, Labels};
use s2c::verifier::{compute_threshold, ratio_score, roc_curve, threshold_lower_bound};

/// Rows of positive weights normalised onto the simplex.
fn simplex_rows(m: usize, rows: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::collection::vec(1e-6f64..1.0, m), rows).prop_map(move |v| {
        let mut a = Array2::zeros((v.len(), m));
        for (i, r) in v.iter().enumerate() {
            let s: f64 = r.iter().sum();
            for (j, x) in r.iter().enumerate() {
                a[[i, j]] = x / s;
            }
        }
        a
    })
}

fn batch(m: usize, n: usize, k: usize) -> impl Strategy<Value = (PredictionBatch, Labels)> {
    (
        simplex_rows(m, k),
        simplex_rows(n, k),
        simplex_rows(n, k),
        simplex_rows(m, k),
        prop::collection::vec(0..m, k),
        prop::collection::vec(0..n, k),
    )
        .prop_map(|(s, w, sw, ws, subjects, keywords)| (PredictionBatch { s, w, sw, ws }, Labels { subjects, keywords }))
}

proptest! {
    #[test]
    fn threshold_never_below_its_bound(p in (2usize..12, 1usize..20).prop_flat_map(|(m, k)| simplex_rows(m, k))) {
        let lam = compute_threshold(p.view()).unwrap();
        prop_assert!(lam >= threshold_lower_bound(p.ncols()).unwrap() * (1.0 - 1e-12));
    }

    #[test]
    fn ratio_is_at_least_one(p in simplex_rows(6, 1)) {
        let r = ratio_score(p.row(0).as_slice().unwrap()).unwrap();
        prop_assert!(r >= 1.0);
    }

    #[test]
    fn loss_total_is_the_sum_of_its_parts((p, l) in batch(4, 5, 6)) {
        let b = loss_components(&p, &l).unwrap();
        prop_assert_eq!(b.total, b.l_s + b.l_w + b.l_sw + b.l_ws);
        prop_assert!(b.l_s >= 0.0 && b.l_w >= 0.0 && b.l_sw >= 0.0 && b.l_ws >= 0.0);
    }

    #[test]
    fn split_counts_partition_every_cell(n in 5usize..400) {
        let (a, b, c) = split_counts(n, (0.6, 0.2, 0.2));
        prop_assert_eq!(a + b + c, n);
        for (got, r) in [(a, 0.6), (b, 0.2), (c, 0.2)] {
            prop_assert!((got as f64 - n as f64 * r).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn roc_is_monotone_and_auc_bounded(scores in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)) {
        prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
        let c = roc_curve(&scores).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.auc));
        for w in c.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let last = c.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // flipping every score mirrors the curve
        let flipped: Vec<_> = scores.iter().map(|&(s, p)| (-s, p)).collect();
        prop_assert!((roc_curve(&flipped).unwrap().auc - (1.0 - c.auc)).abs() < 1e-9);
    }

    #[test]
    fn intervals_and_boxes_are_ordered(v in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let ci = IntervalEstimate::from_samples(&v).unwrap();
        prop_assert!(ci.margin >= 0.0);
        let b = BoxStats::from_samples(&v).unwrap();
        prop_assert!(b.min <= b.q1 && b.q1 <= b.q2 && b.q2 <= b.q3 && b.q3 <= b.max);
        prop_assert!(b.min <= b.mean && b.mean <= b.max);
    }
}

#[test]
fn one_hot_rows_hit_the_bound_exactly() {
    for m in 2..=100 {
        let p = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let lb = threshold_lower_bound(m).unwrap();
        assert!((compute_threshold(p.view()).unwrap() - lb).abs() <= 1e-12 * lb);
    }
}
