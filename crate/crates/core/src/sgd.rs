//! Minibatch SGD driven by a [`Sampler`], with per-epoch metrics.
//!
//! Each iteration draws a weighted minibatch and applies
//! `w_(t+1) = w_t - eta_t * sum_(s, c) c * grad phi_s(w_t)`. An epoch is
//! `ceil(n / b)` iterations' worth of examples: epoch `e` ends at iteration
//! `ceil(e n / b)`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::estimator_variance;
use crate::data::Dataset;
use crate::objective::{test_error, LogisticObjective, Matrix, Model, Objective};
use crate::sampling::{Minibatch, RngState, Sampler, SamplingError};
use crate::strata::{Allocation, Stratification};

#[derive(Debug, Error, PartialEq)]
pub enum SgdError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("diverged at iteration {iteration}: objective {objective} exceeds limit {limit}")]
    Diverged { iteration: usize, objective: f64, limit: f64 },
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<SgdError>,
    },
}

/// Step size `eta_t` for 1-based iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `1 / (lambda t)`.
    InverseLambdaT { lambda: f64 },
    /// `1 / (a + H t)`.
    InverseAPlusHt { a: f64, h: f64 },
    Constant { eta: f64 },
}

impl StepSchedule {
    pub fn eta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1, "iterations are 1-based");
        let t = t as f64;
        match *self {
            StepSchedule::InverseLambdaT { lambda } => 1.0 / (lambda * t),
            StepSchedule::InverseAPlusHt { a, h } => 1.0 / (a + h * t),
            StepSchedule::Constant { eta } => eta,
        }
    }

    pub fn validate(&self) -> Result<(), SgdError> {
        let bad = |m: &str| Err(SgdError::InvalidConfig(m.to_string()));
        match *self {
            StepSchedule::InverseLambdaT { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                bad("1/(λt) schedule needs λ > 0")
            }
            StepSchedule::InverseAPlusHt { a, h }
                if !(h > 0.0 && a >= 0.0 && h.is_finite() && a.is_finite()) =>
            {
                bad("1/(a+Ht) schedule needs H > 0 and a ≥ 0")
            }
            StepSchedule::Constant { eta } if !(eta > 0.0 && eta.is_finite()) => bad("constant step needs η > 0"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Uniform,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sampler: SamplerKind,
    pub batch: usize,
    pub lambda: f64,
    pub schedule: StepSchedule,
    pub epochs: usize,
    pub seed: u64,
    /// Record metrics every this many epochs (the last epoch is always recorded).
    pub metric_every: usize,
    /// Abort when the objective exceeds this multiple of its starting value.
    pub divergence_factor: f64,
    /// When false, the `wall_ms` column is written as zero.
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn new(sampler: SamplerKind, batch: usize, lambda: f64) -> Self {
        Self {
            sampler,
            batch,
            lambda,
            schedule: StepSchedule::InverseLambdaT { lambda },
            epochs: 20,
            seed: 1,
            metric_every: 1,
            divergence_factor: 1e3,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<(), SgdError> {
        let bad = |m: String| Err(SgdError::InvalidConfig(m));
        if self.batch == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.metric_every == 0 {
            return bad("metric cadence must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ must be positive, got {}", self.lambda));
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence factor must exceed 1".into());
        }
        self.schedule.validate()
    }
}

/// Metrics at the end of one recorded epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub test_error: f64,
    pub variance: f64,
    /// Cumulative training time excluding metric evaluation.
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "epoch,objective,test_error,variance,wall_ms";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.3}\n",
                r.epoch, r.objective, r.test_error, r.variance, r.wall_ms
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub weights: Vec<f64>,
}

/// `w -= eta * g` where `g` is the weighted minibatch gradient. `scratch`
/// receives `g`; `w` is left untouched when `g` is not finite.
pub fn sgd_step<O: Objective + ?Sized>(
    obj: &O,
    w: &mut [f64],
    batch: &Minibatch,
    eta: f64,
    scratch: &mut Vec<f64>,
) -> Result<(), SgdError> {
    scratch.clear();
    scratch.resize(w.len(), 0.0);
    obj.add_batch_gradient(w, &batch.draws, scratch);
    if scratch.iter().any(|g| !g.is_finite()) {
        return Err(SgdError::NonFiniteGradient { iteration: 0 });
    }
    for (wj, gj) in w.iter_mut().zip(scratch.iter()) {
        *wj -= eta * gj;
    }
    Ok(())
}

/// One step on a logistic [`Model`] over `dataset`.
pub fn sgd_step_model(model: &Model, batch: &Minibatch, eta: f64, dataset: &Dataset) -> Result<Model, SgdError> {
    let obj = LogisticObjective::new(dataset, model.lambda);
    let mut w = model.weights.as_slice().to_vec();
    sgd_step(&obj, &mut w, batch, eta, &mut Vec::new())?;
    Ok(Model {
        weights: Matrix::from_vec(model.classes(), model.dim(), w),
        lambda: model.lambda,
    })
}

/// Iteration at which epoch `e` ends: `ceil(e n / b)`.
pub fn epoch_boundary(e: usize, n: usize, b: usize) -> usize {
    (e * n).div_ceil(b)
}

/// Runs SGD on any objective from `init` (zero when `None`).
///
/// `test_err` maps the current parameters to the recorded test error.
pub fn run_objective<O, F>(
    obj: &O,
    sampler: &Sampler,
    config: &RunConfig,
    init: Option<&[f64]>,
    test_err: F,
) -> Result<RunOutcome, SgdError>
where
    O: Objective + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    config.validate()?;
    if sampler.batch_size() != config.batch {
        return Err(SgdError::InvalidConfig(format!(
            "sampler draws {} per step but batch is {}",
            sampler.batch_size(),
            config.batch
        )));
    }
    let n = obj.num_examples();
    let b = config.batch;
    let mut w = match init {
        Some(w) if w.len() == obj.num_params() => w.to_vec(),
        Some(w) => {
            return Err(SgdError::InvalidConfig(format!(
                "initial point has {} parameters, expected {}",
                w.len(),
                obj.num_params()
            )))
        }
        None => vec![0.0; obj.num_params()],
    };
    let mut rng = RngState::from_seed(config.seed);
    let mut scratch = Vec::with_capacity(w.len());
    let mut metrics = RunMetrics::default();
    let mut elapsed = 0.0f64;

    let record = |w: &[f64], epoch: usize, elapsed: f64| EpochRecord {
        epoch,
        objective: obj.value(w),
        test_error: test_err(w),
        variance: estimator_variance(obj, w, sampler),
        wall_ms: if config.record_wall_time { elapsed } else { 0.0 },
    };
    let first = record(&w, 0, 0.0);
    let limit = config.divergence_factor * first.objective.abs().max(f64::MIN_POSITIVE);
    metrics.records.push(first);

    let mut t = 0usize;
    for epoch in 1..=config.epochs {
        let end = epoch_boundary(epoch, n, b);
        let start = Instant::now();
        while t < end {
            t += 1;
            let batch = sampler.draw(&mut rng)?;
            sgd_step(obj, &mut w, &batch, config.schedule.eta(t), &mut scratch)
                .map_err(|_| SgdError::NonFiniteGradient { iteration: t })?;
        }
        elapsed += start.elapsed().as_secs_f64() * 1e3;
        if epoch % config.metric_every == 0 || epoch == config.epochs {
            let rec = record(&w, epoch, elapsed);
            if !rec.objective.is_finite() || rec.objective > limit {
                return Err(SgdError::Diverged {
                    iteration: t,
                    objective: rec.objective,
                    limit,
                });
            }
            metrics.records.push(rec);
        }
    }
    Ok(RunOutcome { metrics, weights: w })
}

/// Trains a logistic model on `train`, recording test error on `test`.
///
/// Stratified runs need both a stratification of `train` and an allocation
/// summing to `config.batch`.
pub fn run(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    strata: Option<(&Stratification, &Allocation)>,
) -> Result<RunOutcome, SgdError> {
    run_from(config, train, test, strata, None)
}

/// As [`run`], starting from `init` instead of the zero model.
pub fn run_from(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    strata: Option<(&Stratification, &Allocation)>,
    init: Option<&Model>,
) -> Result<RunOutcome, SgdError> {
    config.validate()?;
    if test.dim() != train.dim() {
        return Err(SgdError::InvalidConfig(format!(
            "test dimension {} differs from train dimension {}",
            test.dim(),
            train.dim()
        )));
    }
    let sampler = match (config.sampler, strata) {
        (SamplerKind::Uniform, _) => Sampler::uniform(train.len(), config.batch)?,
        (SamplerKind::Stratified, Some((strat, alloc))) => {
            if strat.num_points() != train.len() {
                return Err(SgdError::InvalidConfig(format!(
                    "stratification covers {} points but the training set has {}",
                    strat.num_points(),
                    train.len()
                )));
            }
            let m = train.num_classes();
            if strat.num_clusters() < m {
                return Err(SgdError::InvalidConfig(format!(
                    "{} clusters cannot be label-pure over {m} classes",
                    strat.num_clusters()
                )));
            }
            Sampler::stratified(strat.clusters(), alloc.quotas())?
        }
        (SamplerKind::Stratified, None) => {
            return Err(SgdError::InvalidConfig(
                "stratified sampling needs a stratification and an allocation".into(),
            ))
        }
    };
    let obj = LogisticObjective::new(train, config.lambda);
    let (m, d) = (train.num_classes(), train.dim());
    let lambda = config.lambda;
    if let Some(model) = init {
        if (model.classes(), model.dim()) != (m, d) {
            return Err(SgdError::InvalidConfig(format!(
                "initial model is {}x{}, data needs {m}x{d}",
                model.classes(),
                model.dim()
            )));
        }
    }
    let init = init.map(|model| model.weights.as_slice());
    run_objective(&obj, &sampler, config, init, |w| {
        let model = Model {
            weights: Matrix::from_vec(m, d, w.to_vec()),
            lambda,
        };
        test_error(&model, test)
    })
}

/// Per-seed results plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub per_seed: Vec<(u64, RunMetrics)>,
    pub mean: RunMetrics,
    pub std: RunMetrics,
}

/// Runs `config` once per seed in parallel; results keep the order of `seeds`.
pub fn run_seeds(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    strata: Option<(&Stratification, &Allocation)>,
    seeds: &[u64],
) -> Vec<(u64, Result<RunOutcome, SgdError>)> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..config.clone() };
            (seed, run(&cfg, train, test, strata))
        })
        .collect()
}

/// As [`run_seeds`], failing on the first seed (in list order) that errors.
pub fn multi_seed_run(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    strata: Option<(&Stratification, &Allocation)>,
    seeds: &[u64],
) -> Result<SeedSummary, SgdError> {
    if seeds.is_empty() {
        return Err(SgdError::InvalidConfig("at least one seed is required".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for (seed, res) in run_seeds(config, train, test, strata, seeds) {
        match res {
            Ok(out) => per_seed.push((seed, out.metrics)),
            Err(e) => {
                return Err(SgdError::Seed {
                    seed,
                    source: Box::new(e),
                })
            }
        }
    }
    let (mean, std) = aggregate(&per_seed);
    Ok(SeedSummary { per_seed, mean, std })
}

/// Epoch-wise mean and sample standard deviation (zero for a single run).
///
/// Runs are combined in ascending seed order, so the result does not depend
/// on how the seeds were listed.
pub fn aggregate(per_seed: &[(u64, RunMetrics)]) -> (RunMetrics, RunMetrics) {
    let mut sorted: Vec<&(u64, RunMetrics)> = per_seed.iter().collect();
    sorted.sort_by_key(|(s, _)| *s);
    let runs: Vec<&RunMetrics> = sorted.iter().map(|(_, m)| m).collect();
    let Some(first) = runs.first() else {
        return (RunMetrics::default(), RunMetrics::default());
    };
    let k = runs.len() as f64;
    let rows = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let mut mean = RunMetrics::default();
    let mut std = RunMetrics::default();
    for i in 0..rows {
        let column = |f: fn(&EpochRecord) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = runs.iter().map(|r| f(&r.records[i])).collect();
            let mu = xs.iter().sum::<f64>() / k;
            let sd = if xs.len() < 2 {
                0.0
            } else {
                (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (k - 1.0)).sqrt()
            };
            (mu, sd)
        };
        let (o, os) = column(|r| r.objective);
        let (e, es) = column(|r| r.test_error);
        let (v, vs) = column(|r| r.variance);
        let (w, ws) = column(|r| r.wall_ms);
        let epoch = first.records[i].epoch;
        mean.records.push(EpochRecord {
            epoch,
            objective: o,
            test_error: e,
            variance: v,
            wall_ms: w,
        });
        std.records.push(EpochRecord {
            epoch,
            objective: os,
            test_error: es,
            variance: vs,
            wall_ms: ws,
        });
    }
    (mean, std)
}
