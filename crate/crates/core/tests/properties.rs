use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use hcr_core::cohort::{class_weights, grouped_kfold, leakage_violations, Role};
use hcr_core::traineval::{auprc, auroc, paired_ttest_onetailed};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(any::<bool>(), n)).prop_filter_map(
            "needs both classes",
            |(s, mut y)| {
                y[0] = true;
                y[1] = false;
                Some((s.into_iter().map(|v| v as f64 / 19.0).collect(), y))
            },
        )
    })
}

proptest! {
    #[test]
    fn auroc_is_rank_based((s, y) in scored()) {
        let a = auroc(&s, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let squashed: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).tanh()).collect();
        prop_assert!((auroc(&squashed, &y).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&flipped, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn auprc_is_bounded_by_prevalence_and_one((s, y) in scored()) {
        let p = auprc(&s, &y).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
        let perfect: Vec<f64> = y.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
        prop_assert!((auprc(&perfect, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_balance_the_classes(y in prop::collection::vec(any::<bool>(), 2..200)) {
        let pos = y.iter().filter(|l| **l).count();
        match class_weights(&y) {
            Ok((wn, wp)) => {
                let neg = y.len() - pos;
                prop_assert!((wn * neg as f64 - wp * pos as f64).abs() < 1e-9);
                prop_assert!((wn * neg as f64 + wp * pos as f64 - y.len() as f64).abs() < 1e-9);
            }
            Err(_) => prop_assert!(pos == 0 || pos == y.len()),
        }
    }

    #[test]
    fn grouped_folds_partition_subjects(
        subjects in prop::collection::vec(0u64..40, 5..120),
        k in 3usize..7,
        seed in any::<u64>(),
    ) {
        let stays: Vec<(u64, u64)> = subjects.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect();
        let distinct: HashSet<u64> = subjects.iter().copied().collect();
        let folds = match grouped_kfold(&stays, k, seed) {
            Ok(f) => f,
            Err(_) => {
                prop_assert!(distinct.len() < k);
                return Ok(());
            }
        };
        let subject_of: HashMap<u64, u64> = stays.iter().copied().collect();
        let mut tested = HashMap::new();
        for f in &folds {
            prop_assert_eq!(leakage_violations(f, &subject_of), 0);
            prop_assert_eq!(f.roles.len(), stays.len());
            for (h, r) in &f.roles {
                if *r == Role::Test {
                    *tested.entry(*h).or_insert(0) += 1;
                }
            }
        }
        prop_assert_eq!(tested.len(), stays.len());
        prop_assert!(tested.values().all(|c| *c == 1));
    }

    #[test]
    fn one_tailed_p_values_are_complementary(
        a in prop::collection::vec(0.5f64..1.0, 5),
        b in prop::collection::vec(0.5f64..1.0, 5),
    ) {
        let ab = paired_ttest_onetailed(&a, &b).unwrap();
        let ba = paired_ttest_onetailed(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.p));
        if ab.t.is_some() {
            prop_assert!((ab.p + ba.p - 1.0).abs() < 1e-9, "{} + {}", ab.p, ba.p);
        }
    }
}
