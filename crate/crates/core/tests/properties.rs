mod common;

use proptest::prelude::*;
use strata_sgd::analysis::{cocoercivity_gap, convexity_gap, strong_cocoercivity_gap};
use strata_sgd::data::{parse_libsvm_str, Dataset, FeatureVector};
use strata_sgd::objective::{LogisticObjective, Objective};
use strata_sgd::sampling::RngState;
use strata_sgd::synthetic::random_quadratic;

use common::{numeric_gradient, random_dataset, relative_error};

fn sparse_row() -> impl Strategy<Value = (i64, Vec<(u32, f64)>)> {
    (
        -3i64..6,
        prop::collection::btree_map(0u32..40, -1e3f64..1e3, 0..8),
    )
        .prop_map(|(label, entries)| (label, entries.into_iter().filter(|(_, v)| *v != 0.0).collect()))
}

fn logistic_fixture(seed: u64, n: usize, d: usize, classes: usize) -> Dataset {
    let mut rng = RngState::from_seed(seed);
    let labels: Vec<i64> = (0..n).map(|i| (i % classes) as i64).collect();
    random_dataset(&mut rng, &labels, d)
}

fn random_point(rng: &mut RngState, p: usize, scale: f64) -> Vec<f64> {
    (0..p).map(|_| scale * rng.normal()).collect()
}

/// `1/gamma` for softmax cross-entropy plus ridge: `max ||x||^2 / 2 + lambda`.
fn logistic_gamma(ds: &Dataset, lambda: f64) -> f64 {
    let r2 = ds.instances().iter().map(|i| i.features.norm_sq()).fold(0.0, f64::max);
    1.0 / (0.5 * r2 + lambda)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn libsvm_text_round_trips(rows in prop::collection::vec(sparse_row(), 1..20)) {
        let labeled: Vec<(FeatureVector, i64)> = rows
            .iter()
            .map(|(l, e)| (FeatureVector::new(e.clone()).unwrap(), *l))
            .collect();
        let ds = Dataset::from_labeled(labeled, 0).unwrap();
        let text = ds.to_libsvm();
        let back = parse_libsvm_str(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_libsvm(), text);
    }

    #[test]
    fn logistic_objective_is_convex(seed in 0u64..10_000, lambda in 0.0f64..0.1, scale in 0.1f64..5.0) {
        let ds = logistic_fixture(seed, 12, 4, 3);
        let obj = LogisticObjective::new(&ds, lambda);
        let mut rng = RngState::from_seed(seed ^ 0x5eed);
        let p = obj.num_params();
        let (w, u) = (random_point(&mut rng, p, scale), random_point(&mut rng, p, scale));
        let tol = 1e-10 * (1.0 + obj.value(&u).abs() + obj.value(&w).abs());
        prop_assert!(convexity_gap(&obj, &w, &u) >= -tol);
        prop_assert!(convexity_gap(&obj, &u, &w) >= -tol);
    }

    #[test]
    fn logistic_gradients_are_cocoercive(seed in 0u64..10_000, lambda in 0.0f64..0.1, scale in 0.1f64..5.0) {
        let ds = logistic_fixture(seed, 10, 3, 4);
        let obj = LogisticObjective::new(&ds, lambda);
        let gamma = logistic_gamma(&ds, lambda);
        let mut rng = RngState::from_seed(seed.wrapping_mul(31));
        let p = obj.num_params();
        let (u, v) = (random_point(&mut rng, p, scale), random_point(&mut rng, p, scale));
        let gap = cocoercivity_gap(&obj, gamma, &u, &v);
        prop_assert!(gap >= -1e-12, "gap {}", gap);
        if lambda > 0.0 {
            let strong = strong_cocoercivity_gap(&obj, lambda, gamma, &u, &v);
            prop_assert!(strong >= -1e-12, "strong gap {}", strong);
        }
    }

    #[test]
    fn quadratic_gaps_vanish_at_the_tight_constants(seed in 0u64..10_000, h in 0.05f64..5.0) {
        let q = random_quadratic(6, 3, h, 1.0, seed);
        let mut rng = RngState::from_seed(seed);
        let (u, v) = (random_point(&mut rng, 3, 2.0), random_point(&mut rng, 3, 2.0));
        // isotropic: gamma = 1/H makes co-coercivity an equality
        prop_assert!(cocoercivity_gap(&q, q.gamma(), &u, &v).abs() <= 1e-10 * (1.0 + h));
        prop_assert!(convexity_gap(&q, &u, &v) >= 0.0);
        let du: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
        prop_assert!((convexity_gap(&q, &u, &v) - 0.5 * h * du).abs() <= 1e-10 * (1.0 + h * du));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences(seed in 0u64..10_000, lambda in 0.0f64..0.1) {
        let ds = logistic_fixture(seed, 8, 3, 3);
        let obj = LogisticObjective::new(&ds, lambda);
        let mut rng = RngState::from_seed(seed + 1);
        let w = random_point(&mut rng, obj.num_params(), 1.0);
        let err = relative_error(&numeric_gradient(&obj, &w, 1e-5), &obj.gradient(&w));
        prop_assert!(err < 1e-6, "relative error {}", err);
    }
}

#[test]
fn libsvm_tolerates_float_labels_and_comments() {
    let ds = parse_libsvm_str("# header\n1.0 1:0.5 3:2\n\n-1 2:1 # trailing\n").unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.original_labels(), &[-1, 1]);
    assert_eq!(ds.dim(), 3);
}

#[test]
fn libsvm_rejects_malformed_rows() {
    for bad in ["1 0:1\n", "1 2:1 1:1\n", "x 1:1\n", "1 1:nan\n", "1 1-1\n", ""] {
        assert!(parse_libsvm_str(bad).is_err(), "{bad:?} should be rejected");
    }
}
