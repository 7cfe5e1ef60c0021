//! Property tests for invariants plus the oracle and degenerate-case checks.

mod common;

use common::*;
use concat_core::config::RunConfig;
use concat_core::diffcore::Graph;
use concat_core::losses::{cia_loss, kl_loss, mmd_value};
use concat_core::matching::{hungarian, LossWeights};
use concat_core::metrics::{harmonic, mean_iou, panoptic_quality};
use concat_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn two_sets() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=6usize, 1..=6usize, 1..=5usize).prop_flat_map(|(n, m, d)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| Tensor::matrix(n, d, v).unwrap()),
            prop::collection::vec(-5.0f64..5.0, m * d).prop_map(move |v| Tensor::matrix(m, d, v).unwrap()),
        )
    })
}

proptest! {
    #[test]
    fn mmd_is_nonnegative_and_symmetric((x, y) in two_sets()) {
        let bw = LossWeights::default().bandwidths;
        let a = mmd_value(&x, &y, &bw).unwrap();
        let b = mmd_value(&y, &x, &bw).unwrap();
        prop_assert!(a >= -1e-12);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn hungarian_returns_a_valid_assignment(cost in matrix(6, 6).prop_filter("o <= k", |c| c.cols() <= c.rows())) {
        let asg = hungarian(&cost).unwrap();
        prop_assert_eq!(asg.query_to_segment.len(), cost.rows());
        let mut seen = vec![false; cost.cols()];
        for s in asg.query_to_segment.iter().flatten() {
            prop_assert!(!seen[*s]);
            seen[*s] = true;
        }
        prop_assert!(seen.iter().all(|&x| x));
        prop_assert!((asg.total_cost - brute_force_assignment(&cost)).abs() < 1e-9);
    }

    #[test]
    fn harmonic_lies_between_min_and_max(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let h = harmonic(a, b);
        prop_assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
        prop_assert_eq!(h, harmonic(b, a));
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in matrix(5, 6).prop_filter("nonzero rows", |t| (0..t.rows()).all(|r| t.row(r).iter().any(|v| v.abs() > 1e-3)))) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let n = g.l2_normalize(v).unwrap();
        let out = g.value(n);
        for r in 0..out.rows() {
            let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pq_and_iou_are_in_unit_interval(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cases: Vec<_> = (0..r.random_range(1..=4)).map(|_| random_grid_case(&mut r, 6, 3)).collect();
        let (preds, gts): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
        let pq = panoptic_quality(&preds, &gts, &[0, 1, 2]).unwrap();
        let iou = mean_iou(&preds, &gts, &[0, 1, 2]).unwrap();
        for v in pq.per_category.values().map(|c| c.pq()).chain([pq.mean]) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for v in iou.per_category.values().map(|c| c.iou()).chain([iou.mean]) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn config_round_trips_through_json(seed in any::<u64>(), lr in 1e-5f64..1.0, lambda_r in 0.0f64..2.0) {
        let cfg = RunConfig::default()
            .with_seed(seed)
            .apply_overrides(&[format!("stages.base_lr={lr}"), format!("losses.lambda_r={lambda_r}")])
            .unwrap();
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let k = r.random_range(1..=6);
        let o = r.random_range(0..=k);
        let cost = uniform(&mut r, k, o, 10.0);
        let asg = hungarian(&cost).unwrap();
        assert!((asg.total_cost - brute_force_assignment(&cost)).abs() < 1e-9, "{cost:?}");
    }
}

#[test]
fn pq_and_iou_match_pixel_counting() {
    let mut r = rng(12);
    for _ in 0..50 {
        let (p, g) = random_grid_case(&mut r, 8, 4);
        let (preds, gts) = (vec![p], vec![g]);
        let pq = panoptic_quality(&preds, &gts, &[0, 1, 2, 3]).unwrap();
        let iou = mean_iou(&preds, &gts, &[0, 1, 2, 3]).unwrap();
        for c in 0..4 {
            let (tp, fp, fn_, iou_sum) = oracle_pq_counts(&preds, &gts, c);
            let got = &pq.per_category[&c];
            assert_eq!((got.tp, got.fp, got.fn_, got.iou_sum), (tp, fp, fn_, iou_sum));
            assert_eq!(iou.per_category[&c].iou(), oracle_iou(&preds, &gts, c).0);
        }
    }
}

#[test]
fn degenerate_inputs() {
    let x = uniform(&mut rng(13), 5, 3, 3.0);
    assert!(mmd_value(&x, &x, &LossWeights::default().bandwidths).unwrap() < 1e-12);
    let kl = graph_value(|g| {
        let z = g.constant(Tensor::zeros(&[2, 3]));
        kl_loss(g, z, z)
    });
    assert_eq!(kl, 0.0);
    // one matched query and one segment: the positive is the only logit
    let nce = graph_value(|g| {
        let s = g.constant(unit_rows(&mut rng(14), 1, 3));
        Ok(cia_loss(g, Some(s), &unit_rows(&mut rng(15), 1, 3), 0.07)?.value)
    });
    assert_eq!(nce, 0.0);
    assert_eq!(harmonic(0.0, 0.7), 0.0);
    assert_eq!(harmonic(0.7, 0.0), 0.0);
}
