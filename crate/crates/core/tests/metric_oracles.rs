//! Metrics against brute-force oracles, plus their invariants as properties.

use defusion::data::kfold_split;
use defusion::metrics::{accuracy, auc, confusion, f1, pcc_matrix, pearson, FeatureSet, FoldMetrics, MetricReport};
use defusion::tensor::Rng;
use proptest::prelude::*;

mod common;
use common::{accuracy_oracle, auc_pairs, f1_oracle, random_instance as instance};

#[test]
fn fifty_random_instances_match_oracles() {
    let mut rng = Rng::new(4);
    for _ in 0..50 {
        let (s, l) = instance(&mut rng, 100);
        assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() <= 1e-9);
        assert!((f1(&s, &l, 0.5).unwrap() - f1_oracle(&s, &l)).abs() <= 1e-9);
        assert!((accuracy(&s, &l, 0.5).unwrap() - accuracy_oracle(&s, &l)).abs() <= 1e-9);
    }
}

#[test]
fn hand_worked_values() {
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    let c = confusion(&[0.9, 0.2, 0.7, 0.5], &[1, 0, 0, 0], 0.5).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 2, 1, 0));
    assert!((f1(&[0.9, 0.2, 0.7, 0.5], &[1, 0, 0, 0], 0.5).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auc(&[0.1], &[1, 0]).is_err());
    assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    assert!(accuracy(&[], &[], 0.5).is_err());
    assert!(f1(&[0.3], &[2], 0.5).is_err());
}

#[test]
fn summary_uses_population_std() {
    let fold = |a| FoldMetrics { auc: a, f1: 0.5, accuracy: 0.5 };
    let r = MetricReport::from_folds(&[fold(0.7), fold(0.9)]);
    assert!((r.auc.mean - 0.8).abs() < 1e-15);
    assert!((r.auc.std - 0.1).abs() < 1e-12);
    assert_eq!(r.f1.std, 0.0);
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(0u8..2, n).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1)),
        )
    })
}

proptest! {
    #[test]
    fn auc_matches_pairs((s, l) in scored()) {
        prop_assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() <= 1e-9);
    }

    #[test]
    fn auc_of_negated_scores((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc(&neg, &l).unwrap() - (1.0 - auc(&s, &l).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_maps((s, l) in scored()) {
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert!((auc(&mapped, &l).unwrap() - auc(&s, &l).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn f1_and_accuracy_match_counts((s, l) in scored()) {
        prop_assert!((f1(&s, &l, 0.5).unwrap() - f1_oracle(&s, &l)).abs() <= 1e-12);
        prop_assert!((accuracy(&s, &l, 0.5).unwrap() - accuracy_oracle(&s, &l)).abs() <= 1e-12);
        let c = confusion(&s, &l, 0.5).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, s.len());
    }

    #[test]
    fn metrics_bounded((s, l) in scored()) {
        for v in [auc(&s, &l).unwrap(), f1(&s, &l, 0.5).unwrap(), accuracy(&s, &l, 0.5).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pearson_symmetric_and_bounded(
        u in prop::collection::vec(-5.0f64..5.0, 3..40),
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let v: Vec<f64> = u.iter().map(|x| x * rng.normal() + rng.normal()).collect();
        let r = pearson(&u, &v);
        prop_assert!((r - pearson(&v, &u)).abs() <= 1e-12);
        prop_assert!(r.abs() <= 1.0 + 1e-12);
        let scaled: Vec<f64> = u.iter().map(|x| 2.5 * x - 1.0).collect();
        if u.iter().any(|&x| (x - u[0]).abs() > 1e-6) {
            prop_assert!((pearson(&u, &scaled) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn pcc_matrix_symmetric_unit_diagonal(seed in 0u64..500, n in 5usize..30, d in 2usize..6) {
        let mut rng = Rng::new(seed);
        let mut fs = FeatureSet { case_ids: (0..n).map(|i| i.to_string()).collect(), ..Default::default() };
        for k in 0..4 {
            fs.kinds[k] = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        }
        let m = pcc_matrix(&fs).unwrap();
        for i in 0..4 {
            prop_assert!((m.matrix[i][i] - 1.0).abs() <= 1e-9);
            for j in 0..4 {
                prop_assert!((m.matrix[i][j] - m.matrix[j][i]).abs() <= 1e-12);
                prop_assert!(m.matrix[i][j].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn folds_partition_and_stratify(
        labels in prop::collection::vec(0u8..2, 10..120),
        k in 2usize..6,
        seed in 0u64..100,
    ) {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos >= k && labels.len() - pos >= k);
        let plan = kfold_split(&labels, k, seed, true).unwrap();
        let mut seen = vec![0usize; labels.len()];
        let mut positives = Vec::new();
        for f in 0..k {
            let (train, test) = plan.split(f);
            prop_assert_eq!(train.len() + test.len(), labels.len());
            prop_assert!(train.iter().all(|i| !test.contains(i)));
            for &i in &test {
                seen[i] += 1;
            }
            positives.push(test.iter().filter(|&&i| labels[i] == 1).count());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let (lo, hi) = (positives.iter().min().unwrap(), positives.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(plan.assignments.clone(), kfold_split(&labels, k, seed, true).unwrap().assignments);
    }
}
