mod common;

use strata_sgd::analysis::{exact_stratified_variance, exact_uniform_variance, stratified_variance, uniform_variance};
use strata_sgd::data::Dataset;
use strata_sgd::objective::{LogisticObjective, Model, Objective};
use strata_sgd::sampling::{RngState, Sampler};
use strata_sgd::sgd::{run, run_objective, RunConfig, SamplerKind, StepSchedule};
use strata_sgd::strata::{Allocation, Stratification};
use strata_sgd::synthetic::random_quadratic;

use common::{enumerate_moments, random_dataset, random_model, stratified_outcomes, uniform_outcomes};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn five_points() -> (Dataset, Model) {
    let mut rng = RngState::from_seed(21);
    let ds = random_dataset(&mut rng, &[1, 1, 2, 1, 2], 3);
    let model = random_model(&mut rng, 2, 3, 0.05, 0.7);
    (ds, model)
}

#[test]
fn stratified_variance_matches_full_enumeration() {
    let (ds, model) = five_points();
    let clusters = vec![vec![0, 1, 3], vec![2, 4]];
    let strat = Stratification::from_clusters(&ds, clusters.clone()).unwrap();
    let obj = LogisticObjective::new(&ds, model.lambda);
    let w = model.weights.as_slice();
    for quotas in [vec![2, 1], vec![1, 2]] {
        let outcomes = stratified_outcomes(&clusters, &quotas);
        assert_eq!(outcomes.len(), 3usize.pow(quotas[0] as u32) * 2usize.pow(quotas[1] as u32));
        let (mean, var) = enumerate_moments(&obj, w, &outcomes);
        let full = obj.gradient(w);
        for (a, b) in mean.iter().zip(&full) {
            assert!((a - b).abs() < 1e-14, "unbiasedness: {a} vs {b}");
        }
        let alloc = Allocation::new(quotas.clone()).unwrap();
        let exact = exact_stratified_variance(&model, &strat, &alloc, &ds).unwrap();
        assert!(close(exact, var, 1e-12), "{quotas:?}: {exact} vs {var}");
    }
}

#[test]
fn uniform_variance_matches_full_enumeration() {
    let mut rng = RngState::from_seed(3);
    let ds = random_dataset(&mut rng, &[1, 2, 2, 3], 2);
    let model = random_model(&mut rng, 3, 2, 0.1, 1.0);
    let obj = LogisticObjective::new(&ds, model.lambda);
    let w = model.weights.as_slice();
    let outcomes = uniform_outcomes(4, 2);
    assert_eq!(outcomes.len(), 16);
    let (mean, var) = enumerate_moments(&obj, w, &outcomes);
    for (a, b) in mean.iter().zip(obj.gradient(w)) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(close(exact_uniform_variance(&model, &ds, 2), var, 1e-12));
}

#[test]
fn singleton_strata_have_zero_variance() {
    let q = random_quadratic(7, 3, 2.0, 1.0, 5);
    let clusters: Vec<Vec<usize>> = (0..7).map(|i| vec![i]).collect();
    let quotas = vec![1; 7];
    let w = [0.3, -1.0, 2.0];
    assert_eq!(stratified_variance(&q, &w, &clusters, &quotas), 0.0);
    assert!(uniform_variance(&q, &w, 7) > 0.0);
}

#[test]
fn quadratic_full_batch_run_follows_closed_form() {
    let n = 6;
    let h = 1.5;
    let q = random_quadratic(n, 4, h, 2.0, 9);
    let clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let quotas = vec![1; n];
    let sampler = Sampler::stratified(&clusters, &quotas).unwrap();
    let mut config = RunConfig::new(SamplerKind::Stratified, n, 0.5);
    config.schedule = StepSchedule::InverseAPlusHt { a: 1.0, h };
    config.epochs = 12;
    config.record_wall_time = false;
    let out = run_objective(&q, &sampler, &config, None, |_| 0.0).unwrap();

    // each step is a full gradient step: w - w* shrinks by (1 - eta_t H)
    let mut factor = 1.0;
    let start = q.suboptimality(&[0.0; 4]);
    for rec in &out.metrics.records {
        if rec.epoch > 0 {
            let eta = config.schedule.eta(rec.epoch);
            factor *= 1.0 - eta * h;
        }
        let expected = q.optimal_value() + factor * factor * start;
        assert!(close(rec.objective, expected, 1e-12), "epoch {}: {} vs {expected}", rec.epoch, rec.objective);
        assert_eq!(rec.variance, 0.0);
        assert_eq!(rec.wall_ms, 0.0);
    }
    assert_eq!(out.metrics.records.len(), 13);
}

#[test]
fn one_stratum_training_is_identical_to_uniform() {
    let mut rng = RngState::from_seed(12);
    let labels = vec![4i64; 40];
    let train = random_dataset(&mut rng, &labels, 5);
    let test = random_dataset(&mut rng, &labels[..10], 5);
    let strat = Stratification::from_clusters(&train, vec![(0..40).collect()]).unwrap();
    let alloc = Allocation::new(vec![6]).unwrap();
    let mut config = RunConfig::new(SamplerKind::Uniform, 6, 0.01);
    config.epochs = 5;
    config.seed = 7;
    config.record_wall_time = false;
    let uniform = run(&config, &train, &test, None).unwrap();
    config.sampler = SamplerKind::Stratified;
    let stratified = run(&config, &train, &test, Some((&strat, &alloc))).unwrap();
    assert_eq!(uniform.metrics.to_csv(), stratified.metrics.to_csv());
    assert_eq!(uniform.weights, stratified.weights);
}

#[test]
fn epoch_records_sit_on_ceil_boundaries() {
    let q = random_quadratic(10, 2, 1.0, 0.0, 2);
    let sampler = Sampler::uniform(10, 3).unwrap();
    let mut config = RunConfig::new(SamplerKind::Uniform, 3, 1.0);
    config.schedule = StepSchedule::Constant { eta: 0.1 };
    config.epochs = 7;
    config.metric_every = 3;
    let out = run_objective(&q, &sampler, &config, None, |_| 0.0).unwrap();
    let epochs: Vec<usize> = out.metrics.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 3, 6, 7]);
}
