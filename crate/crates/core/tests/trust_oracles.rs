mod common;

use common::*;
use evidentia::par::Exec;
use evidentia::seed;
use evidentia::trust::{self, CostParams, EvalRecord};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn rec(y: usize, pred: usize, eps: f64, prob: f64) -> EvalRecord {
    EvalRecord::new(y, pred as f64, pred, eps, 0.1, prob).unwrap()
}

#[test]
fn metrics_match_brute_force_on_random_record_sets() {
    let mut rng = seed::rng(41);
    for _ in 0..100 {
        let n = rng.random_range(2..300);
        let records = random_records_two_class(&mut rng, n);
        let y: Vec<usize> = records.iter().map(|r| r.y_true).collect();
        let p: Vec<usize> = records.iter().map(|r| r.grade_pred).collect();

        assert!((trust::qwk(&y, &p).unwrap() - qwk_brute(&y, &p)).abs() <= 1e-10);
        let roc = trust::roc(&records).unwrap();
        assert!((roc.auc - auc_pairs(&records)).abs() <= 1e-10);
        assert!((trust::pr_curve(&records).unwrap().ap - ap_brute(&records)).abs() <= 1e-10);
        assert!((trust::reliability(&records, 10).unwrap().ece - ece_brute(&records, 10)).abs() <= 1e-10);
        assert_eq!(trust::confusion_matrix(&records).unwrap().counts, confusion_brute(&records));
        assert_eq!(trust::error_distribution(&records), error_hist_brute(&records));

        let pos: Vec<f64> = records.iter().filter(|r| r.positive()).map(|r| r.prob_oa).collect();
        let neg: Vec<f64> = records.iter().filter(|r| !r.positive()).map(|r| r.prob_oa).collect();
        let mw = trust::mann_whitney_greater(&pos, &neg).unwrap();
        assert!((roc.auc - mw.u / (pos.len() * neg.len()) as f64).abs() <= 1e-12);

        let m = trust::ordinal_metrics(&records).unwrap();
        for k in 0..5 {
            let tp = records.iter().filter(|r| r.y_true == k && r.grade_pred == k).count() as f64;
            let support = records.iter().filter(|r| r.y_true == k).count() as f64;
            let predicted = records.iter().filter(|r| r.grade_pred == k).count() as f64;
            if support == 0.0 {
                assert!(m.f1[k].is_none());
                continue;
            }
            let (precision, recall) = (if predicted > 0.0 { tp / predicted } else { 0.0 }, tp / support);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            assert!((m.f1[k].unwrap() - f1).abs() <= 1e-12);
        }
    }
}

#[test]
fn metric_examples() {
    assert_eq!(trust::qwk(&[0, 1, 2, 3, 4], &[4, 3, 2, 1, 0]).unwrap(), -1.0);
    let recs = [rec(0, 4, 0.1, 0.1), rec(4, 0, 0.1, 0.9)];
    let m = trust::ordinal_metrics(&recs).unwrap();
    assert_eq!((m.accuracy, m.mse), (0.0, 16.0));
    assert_eq!(trust::error_distribution(&[rec(1, 3, 0.1, 0.5)])[6], 1);
    let c = trust::confusion_matrix(&[rec(2, 3, 0.1, 0.5)]).unwrap();
    assert_eq!(c.counts[2][3], 1);

    // calibrated coin flips
    let half: Vec<_> = (0..10).map(|i| rec(if i % 2 == 0 { 3 } else { 0 }, 2, 0.1, 0.5)).collect();
    let rel = trust::reliability(&half, 10).unwrap();
    assert_eq!((rel.ece, rel.brier), (0.0, 0.25));

    // negatives ranked above every positive: AP is the tail precision
    let tail = [rec(0, 0, 0.1, 0.9), rec(1, 0, 0.1, 0.8), rec(0, 0, 0.1, 0.7), rec(3, 3, 0.1, 0.2)];
    assert!((trust::pr_curve(&tail).unwrap().ap - 0.25).abs() < 1e-15);
    assert!((ap_brute(&tail) - 0.25).abs() < 1e-15);
}

#[test]
fn mann_whitney_complete_separation_is_one_in_252() {
    let hi = [6.0, 7.0, 8.0, 9.0, 10.0];
    let lo = [1.0, 2.0, 3.0, 4.0, 5.0];
    let t = trust::mann_whitney_greater(&hi, &lo).unwrap();
    assert!(t.exact);
    assert_eq!(t.u, 25.0);
    assert!((t.p_value - 1.0 / 252.0).abs() < 1e-15);
    assert!(trust::mann_whitney_greater(&lo, &hi).unwrap().p_value > 0.99);
}

#[test]
fn mann_whitney_null_is_calibrated() {
    let mut rng = seed::rng(42);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for (n, repeats) in [(5usize, 2000usize), (40, 2000)] {
        let mut deciles = [0f64; 10];
        let mut below = 0;
        for _ in 0..repeats {
            let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let p = trust::mann_whitney_greater(&x, &y).unwrap().p_value;
            if p <= 0.05 {
                below += 1;
            }
            deciles[((p * 10.0) as usize).min(9)] += 1.0;
        }
        // rejection rate at 5% within three binomial standard errors
        let rate = below as f64 / repeats as f64;
        let se = (0.05 * 0.95 / repeats as f64).sqrt();
        assert!(rate <= 0.05 + 3.0 * se, "n={n}: rate {rate}");
        if n > 20 {
            assert!(rate >= 0.05 - 3.0 * se, "n={n}: rate {rate}");
            let e = repeats as f64 / 10.0;
            let chi2: f64 = deciles.iter().map(|o| (o - e).powi(2) / e).sum();
            assert!(chi2_sf(chi2, 9.0) > 0.001, "χ² {chi2}");
        }
    }
}

#[test]
fn decision_curve_examples() {
    // prevalence 0.5
    let recs: Vec<_> = (0..8).map(|i| if i < 4 { rec(3, 3, 0.1, 0.9) } else { rec(0, 0, 0.1, 0.1) }).collect();
    let d = trust::net_benefit(&recs, &[0.25, 0.5]).unwrap();
    let n = recs.len() as f64;
    let (tp, fp) = (recs.iter().filter(|r| r.positive()).count() as f64, recs.iter().filter(|r| !r.positive()).count() as f64);
    let counted = tp / n - fp / n * (0.25 / 0.75);
    assert!((d.treat_all.y[0] - counted).abs() < 1e-15);
    assert!((d.treat_all.y[0] - 0.3333).abs() < 5e-5);
    assert!(d.treat_none.y.iter().all(|&v| v == 0.0));
    // the model separates perfectly, so its net benefit is the prevalence
    assert!(d.model.y.iter().all(|&v| v == 0.5));
}

#[test]
fn model_dominating_treat_all_has_higher_net_benefit() {
    let mut rng = seed::rng(43);
    for _ in 0..50 {
        let records = random_records_two_class(&mut rng, 200);
        // a model that never flags a negative and flags every positive
        let perfect: Vec<_> = records.iter().map(|r| rec(r.y_true, r.grade_pred, 0.1, if r.positive() { 1.0 } else { 0.0 })).collect();
        let d = trust::net_benefit(&perfect, &trust::default_thresholds()).unwrap();
        for (m, a) in d.model.y.iter().zip(&d.treat_all.y) {
            assert!(m >= a);
        }
    }
}

#[test]
fn rejection_oracles() {
    // oracle uncertainty: errors are exactly the most uncertain cases
    let mut rng = seed::rng(44);
    let recs: Vec<_> = (0..200)
        .map(|_| {
            let wrong = rng.random::<f64>() < 0.25;
            rec(2, if wrong { 3 } else { 2 }, if wrong { 1.0 } else { 0.1 }, 0.5)
        })
        .collect();
    let err = recs.iter().filter(|r| !r.correct()).count() as f64 / 200.0;
    assert_eq!(trust::retained_accuracy(&recs, err).unwrap(), 1.0);
    assert!(trust::retained_accuracy(&recs, err - 0.005).unwrap() < 1.0);
    let curve = trust::rejection_curve(&recs).unwrap();
    assert_eq!(curve.y[0], 1.0 - err);

    // uncertainty independent of correctness: flat up to sampling noise
    let n = 20_000;
    let recs: Vec<_> = (0..n)
        .map(|_| {
            let wrong = rng.random::<f64>() < 0.3;
            rec(1, if wrong { 0 } else { 1 }, rng.random_range(0.01..1.0), 0.5)
        })
        .collect();
    let curve = trust::rejection_curve(&recs).unwrap();
    let acc0 = curve.y[0];
    for (r, acc) in curve.x.iter().zip(&curve.y) {
        let kept = n as f64 * (1.0 - r);
        assert!((acc - acc0).abs() <= 4.0 * (0.21 / kept).sqrt(), "r={r}: {acc} vs {acc0}");
    }
}

#[test]
fn cost_endpoints_by_counting() {
    let mut rng = seed::rng(45);
    let costs = CostParams::default();
    for _ in 0..20 {
        let records = random_records(&mut rng, 150);
        let curve = trust::cost_profile(&records, &costs, &[0.0, 0.5, 1.0]).unwrap();
        let fneg = records.iter().filter(|r| r.positive() && !r.predicted_positive()).count() as f64;
        let fpos = records.iter().filter(|r| !r.positive() && r.predicted_positive()).count() as f64;
        let n = records.len() as f64;
        let at_zero = costs.ai + (costs.false_negative * fneg + costs.false_positive * fpos) / n;
        assert!((curve.y[0] - at_zero).abs() < 1e-12);
        assert!((curve.y[2] - costs.review).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_constant_statistic_and_reproducibility() {
    let mut rng = seed::rng(46);
    let records = random_records_two_class(&mut rng, 80);
    let band = trust::bootstrap_band(&records, 200, 0.95, 9, Exec::Parallel, |_| Ok(vec![1.5, -2.0])).unwrap();
    assert_eq!(band.lower, band.upper);
    let a = trust::roc_band(&records, 200, 3, Exec::Parallel).unwrap();
    let b = trust::roc_band(&records, 200, 3, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.curve.validate().is_ok());
}

#[test]
fn bootstrap_auc_band_covers_the_truth() {
    // positives score N(d, 1), negatives N(0, 1): AUC = Φ(d / √2)
    let d = 1.0;
    let truth = 1.0 - trust::normal_sf(d / 2f64.sqrt());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = seed::rng(47);
    let trials = 200;
    let mut covered = 0;
    for t in 0..trials {
        let records: Vec<_> = (0..200)
            .map(|i| {
                let positive = i % 2 == 0;
                let s = normal.sample(&mut rng) + if positive { d } else { 0.0 };
                rec(if positive { 3 } else { 0 }, 2, 0.1, 1.0 - trust::normal_sf(s))
            })
            .collect();
        let band = trust::bootstrap_band(&records, 400, 0.95, t as u64, Exec::Parallel, |r| Ok(vec![trust::roc(r)?.auc])).unwrap();
        if band.lower[0] <= truth && truth <= band.upper[0] {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;
    assert!((coverage - 0.95).abs() <= 0.04, "coverage {coverage}");
}

proptest! {
    #[test]
    fn qwk_symmetric_and_shift_invariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 2..60)) {
        let y: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let k = trust::qwk(&y, &p).unwrap();
        prop_assert!((k - trust::qwk(&p, &y).unwrap()).abs() <= 1e-12);
        prop_assert!(k <= 1.0 + 1e-12 && k >= -1.0 - 1e-12);
        let ys: Vec<usize> = y.iter().map(|v| v + 1).collect();
        let ps: Vec<usize> = p.iter().map(|v| v + 1).collect();
        prop_assert!((k - trust::qwk(&ys, &ps).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(trust::qwk(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn rejection_starts_at_accuracy(seed_v in any::<u64>(), n in 1usize..200) {
        let mut rng = seed::rng(seed_v);
        let records = random_records(&mut rng, n);
        let acc = trust::ordinal_metrics(&records).unwrap().accuracy;
        prop_assert_eq!(trust::rejection_curve(&records).unwrap().y[0], acc);
        prop_assert_eq!(trust::retained_accuracy(&records, 0.0).unwrap(), acc);
    }

    #[test]
    fn bootstrap_is_seed_deterministic(seed_v in any::<u64>()) {
        let mut rng = seed::rng(seed_v);
        let records = random_records_two_class(&mut rng, 40);
        let a = trust::pr_band(&records, 100, seed_v, Exec::Parallel).unwrap();
        let b = trust::pr_band(&records, 100, seed_v, Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }
}
