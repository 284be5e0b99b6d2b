//! Estimator variance and numeric checks of the convergence bounds.
//!
//! For a weighted minibatch estimate `g` of `grad P(w)`, the variance is
//! `V = E ||g - grad P(w)||^2`. With `S_C = sum_(s in C) ||grad phi_s - mean_C||^2`:
//!
//! - stratified draws (`b_i` from cluster `C_i`): `V = (1/n^2) sum_i (n_i / b_i) S_(C_i)`;
//! - uniform draws (`b` from `0..n`): `V = (1/b) (1/n) S_(0..n)`, the one-cluster case.
//!
//! The bound checkers simulate SGD on a [`QuadraticProblem`], where `H`,
//! `gamma = 1/H` and `w*` are exact. With zero-variance sampling the
//! simulation is deterministic. Otherwise each inequality is checked on the
//! mean over independent replicates, with a four-standard-error cushion.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::objective::{norm_sq, LogisticObjective, Model, Objective, QuadraticProblem};
use crate::sampling::{Minibatch, RngState, Sampler, SamplingError};
use crate::sgd::{sgd_step, StepSchedule};
use crate::strata::{Allocation, Stratification};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("inadmissible constants: {0}")]
    Inadmissible(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("non-finite iterate at step {0}")]
    NonFinite(usize),
}

/// `sum_(s in members) ||grad phi_s(w) - mean||^2`, accumulated with Welford's
/// update so that identical gradients give exactly zero.
pub fn cluster_scatter<O: Objective + ?Sized>(obj: &O, w: &[f64], members: &[usize]) -> f64 {
    let p = obj.num_params();
    let mut mean = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut m2 = 0.0;
    for (k, &s) in members.iter().enumerate() {
        g.iter_mut().for_each(|v| *v = 0.0);
        obj.add_example_gradient(w, s, 1.0, &mut g);
        let inv = 1.0 / (k + 1) as f64;
        for (mu, &gj) in mean.iter_mut().zip(&g) {
            let delta = gj - *mu;
            *mu += delta * inv;
            m2 += delta * (gj - *mu);
        }
    }
    m2.max(0.0)
}

/// Exact variance of the stratified estimator.
pub fn stratified_variance<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    clusters: &[Vec<usize>],
    quotas: &[usize],
) -> f64 {
    let n = obj.num_examples() as f64;
    clusters
        .iter()
        .zip(quotas)
        .map(|(c, &b)| (c.len() as f64 / b as f64) * cluster_scatter(obj, w, c) / (n * n))
        .sum()
}

/// Exact variance of the uniform with-replacement estimator with batch `b`.
pub fn uniform_variance<O: Objective + ?Sized>(obj: &O, w: &[f64], b: usize) -> f64 {
    let n = obj.num_examples();
    let all: Vec<usize> = (0..n).collect();
    let nf = n as f64;
    (nf / b as f64) * cluster_scatter(obj, w, &all) / (nf * nf)
}

/// Exact variance of whichever estimator `sampler` produces.
pub fn estimator_variance<O: Objective + ?Sized>(obj: &O, w: &[f64], sampler: &Sampler) -> f64 {
    match sampler {
        Sampler::Uniform { batch, .. } => uniform_variance(obj, w, *batch),
        Sampler::Stratified(plan) => stratified_variance(obj, w, plan.clusters(), plan.quotas()),
    }
}

pub fn exact_stratified_variance(
    model: &Model,
    strat: &Stratification,
    alloc: &Allocation,
    dataset: &Dataset,
) -> Result<f64, AnalysisError> {
    if alloc.len() != strat.num_clusters() {
        return Err(SamplingError::MismatchedClusters {
            quotas: alloc.len(),
            clusters: strat.num_clusters(),
        }
        .into());
    }
    let obj = LogisticObjective::new(dataset, model.lambda);
    Ok(stratified_variance(
        &obj,
        model.weights.as_slice(),
        strat.clusters(),
        alloc.quotas(),
    ))
}

pub fn exact_uniform_variance(model: &Model, dataset: &Dataset, b: usize) -> f64 {
    let obj = LogisticObjective::new(dataset, model.lambda);
    uniform_variance(&obj, model.weights.as_slice(), b)
}

/// `(1/n) sum_s grad phi_s(w)` accumulated the same way a minibatch is, so a
/// batch holding every index once with weight `1/n` reproduces it exactly.
pub fn mean_gradient<O: Objective + ?Sized>(obj: &O, w: &[f64]) -> Vec<f64> {
    let n = obj.num_examples();
    let inv = 1.0 / n as f64;
    let all: Vec<(usize, f64)> = (0..n).map(|s| (s, inv)).collect();
    let mut out = vec![0.0; obj.num_params()];
    obj.add_batch_gradient(w, &all, &mut out);
    out
}

/// Monte Carlo estimate of `E ||g - grad P(w)||^2` and its standard error.
pub fn empirical_variance<O, F>(
    obj: &O,
    w: &[f64],
    mut draw: F,
    draws: usize,
    rng: &mut RngState,
) -> Result<(f64, f64), SamplingError>
where
    O: Objective + ?Sized,
    F: FnMut(&mut RngState) -> Result<Minibatch, SamplingError>,
{
    assert!(draws >= 2, "need at least two draws");
    let full = mean_gradient(obj, w);
    let mut g = vec![0.0; obj.num_params()];
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=draws {
        let batch = draw(rng)?;
        g.iter_mut().for_each(|v| *v = 0.0);
        obj.add_batch_gradient(w, &batch.draws, &mut g);
        let dev: f64 = g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum();
        let delta = dev - mean;
        mean += delta / k as f64;
        m2 += delta * (dev - mean);
    }
    let var = m2 / (draws - 1) as f64;
    Ok((mean, (var / draws as f64).sqrt()))
}

/// Exact and (optionally) sampled variances of both estimators at one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub exact_stratified: f64,
    pub exact_uniform: f64,
    /// `(mean, standard error)` of the stratified estimator.
    pub empirical_stratified: Option<(f64, f64)>,
    pub empirical_uniform: Option<(f64, f64)>,
}

impl VarianceReport {
    /// Whether every sampled mean lies within four standard errors of its exact value.
    pub fn consistent(&self) -> bool {
        let ok = |e: Option<(f64, f64)>, exact: f64| {
            e.is_none_or(|(m, se)| (m - exact).abs() <= 4.0 * se + 1e-15 * exact.max(1.0))
        };
        ok(self.empirical_stratified, self.exact_stratified) && ok(self.empirical_uniform, self.exact_uniform)
    }
}

/// Which inequality a [`BoundTrace`] checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Lemma1,
    Theorem1,
    Theorem2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub step: usize,
    /// Mean over replicates of the left-hand side.
    pub lhs: f64,
    /// Mean over replicates of the right-hand side.
    pub bound: f64,
    /// Mean `||w_t - w*||^2` at the start of the step.
    pub distance_sq: f64,
    /// Mean exact `V_t` at the start of the step.
    pub variance: f64,
    /// Standard error of `lhs - bound` across replicates (zero when deterministic).
    pub gap_se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTrace {
    pub kind: BoundKind,
    pub strength: f64,
    pub gamma: f64,
    pub eta: Option<f64>,
    pub a: Option<f64>,
    pub alpha: Option<f64>,
    pub replicates: usize,
    pub slack: f64,
    pub rows: Vec<BoundRow>,
}

impl BoundTrace {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn first_failure(&self) -> Option<&BoundRow> {
        self.rows.iter().find(|r| !r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lhs,bound,distance_sq,variance,gap_se,pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                r.step,
                r.lhs,
                r.bound,
                r.distance_sq,
                r.variance,
                r.gap_se,
                u8::from(r.pass)
            ));
        }
        out
    }
}

/// Sampling and replication settings for the bound checkers.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    /// Strata over the anchors; `None` samples uniformly with `batch` draws.
    pub clusters: Option<Vec<Vec<usize>>>,
    pub quotas: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
    /// Used only when the estimator variance is nonzero; at least 100 are run.
    pub replicates: usize,
    pub seed: u64,
    /// Absolute slack added to the right-hand side.
    pub slack: f64,
}

impl CheckConfig {
    /// Singleton strata with one draw each: the full gradient, `V_t = 0`.
    pub fn zero_variance(n: usize, steps: usize) -> Self {
        Self {
            clusters: Some((0..n).map(|i| vec![i]).collect()),
            quotas: vec![1; n],
            batch: n,
            steps,
            replicates: 1,
            seed: 0,
            slack: 1e-10,
        }
    }

    fn sampler(&self, n: usize) -> Result<Sampler<'_>, SamplingError> {
        match &self.clusters {
            Some(c) => Sampler::stratified(c, &self.quotas),
            None => Sampler::uniform(n, self.batch),
        }
    }
}

/// Per-replicate history: `dist[t] = ||w_(t+1) - w*||^2` for `t = 0..=T`,
/// `sub[t] = P(w_(t+2)) - P(w*)` and `var[t] = V_(t+1)` for `t = 0..T`.
struct Replicate {
    dist: Vec<f64>,
    sub: Vec<f64>,
    var: Vec<f64>,
}

fn simulate(
    problem: &QuadraticProblem,
    schedule: &StepSchedule,
    config: &CheckConfig,
) -> Result<Vec<Replicate>, AnalysisError> {
    let sampler = config.sampler(problem.num_examples())?;
    let w0 = vec![0.0; problem.dim()];
    let reps = if estimator_variance(problem, &w0, &sampler) == 0.0 {
        1
    } else {
        config.replicates.max(100)
    };
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngState::from_seed(config.seed.wrapping_add(r));
            let mut w = w0.clone();
            let mut scratch = vec![0.0; w.len()];
            let wstar = problem.optimum();
            let mut rep = Replicate {
                dist: vec![dist_sq(&w, wstar)],
                sub: Vec::with_capacity(config.steps),
                var: Vec::with_capacity(config.steps),
            };
            for t in 1..=config.steps {
                rep.var.push(estimator_variance(problem, &w, &sampler));
                let batch = sampler.draw(&mut rng)?;
                sgd_step(problem, &mut w, &batch, schedule.eta(t), &mut scratch)
                    .map_err(|_| AnalysisError::NonFinite(t))?;
                rep.sub.push(problem.suboptimality(&w));
                rep.dist.push(dist_sq(&w, wstar));
            }
            Ok(rep)
        })
        .collect()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Builds rows from per-replicate `(lhs, rhs)` series for steps `1..=T`.
fn summarize(
    reps: &[Replicate],
    slack: f64,
    mut sides: impl FnMut(&Replicate, usize) -> (f64, f64),
    steps: usize,
) -> Vec<BoundRow> {
    let mut rows = Vec::with_capacity(steps);
    for t in 1..=steps {
        let pairs: Vec<(f64, f64)> = reps.iter().map(|r| sides(r, t)).collect();
        let gaps: Vec<f64> = pairs.iter().map(|(l, r)| l - r).collect();
        let (gap, se) = mean_se(&gaps);
        let lhs = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        let bound = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        let distance_sq = reps.iter().map(|r| r.dist[t - 1]).sum::<f64>() / reps.len() as f64;
        let variance = reps.iter().map(|r| r.var[t - 1]).sum::<f64>() / reps.len() as f64;
        rows.push(BoundRow {
            step: t,
            lhs,
            bound,
            distance_sq,
            variance,
            gap_se: se,
            pass: gap <= 4.0 * se + slack,
        });
    }
    rows
}

/// Linear-rate bound for a constant step `eta ∈ (0, 2/(H + 1/gamma)]`:
/// `E P(w_(T+1)) - P(w*) ≤ alpha^T/(2 gamma) ||w*||^2 + eta^2/(2 gamma) sum_t alpha^(T-t) E V_t`
/// with `alpha = 1 - (2 eta H/gamma)/(H + 1/gamma)`, checked for every `T ≤ steps`.
pub fn check_theorem2(
    problem: &QuadraticProblem,
    eta: f64,
    config: &CheckConfig,
) -> Result<BoundTrace, AnalysisError> {
    let h = problem.strength();
    let gamma = problem.gamma();
    let limit = 2.0 / (h + 1.0 / gamma);
    if !(eta > 0.0 && eta <= limit) {
        return Err(AnalysisError::Inadmissible(format!(
            "η ∈ (0, 2/(H+1/γ)] violated: η = {eta}, 2/(H+1/γ) = {limit}"
        )));
    }
    let alpha = theorem2_alpha(h, gamma, eta);
    let reps = simulate(problem, &StepSchedule::Constant { eta }, config)?;
    let w_star_sq = norm_sq(problem.optimum());
    let rows = summarize(
        &reps,
        config.slack,
        |r, t| {
            // sum_(s=1..t) alpha^(t-s) V_s
            let weighted = r.var[..t].iter().fold(0.0, |acc, v| alpha * acc + v);
            let bound =
                alpha.powi(t as i32) / (2.0 * gamma) * w_star_sq + eta * eta / (2.0 * gamma) * weighted;
            (r.sub[t - 1], bound)
        },
        config.steps,
    );
    Ok(BoundTrace {
        kind: BoundKind::Theorem2,
        strength: h,
        gamma,
        eta: Some(eta),
        a: None,
        alpha: Some(alpha),
        replicates: reps.len(),
        slack: config.slack,
        rows,
    })
}

/// `alpha(eta) = 1 - (2 eta H/gamma) / (H + 1/gamma)`.
pub fn theorem2_alpha(h: f64, gamma: f64, eta: f64) -> f64 {
    1.0 - (2.0 * eta * h / gamma) / (h + 1.0 / gamma)
}

/// Averaged bound for `eta_t = 1/(a + H t)` with `a ≥ 1/gamma - H`:
/// `(1/T) sum_t E P(w_(t+1)) - P(w*) ≤ (1/T) [ (a/2) ||w*||^2 + E sum_t V_t/(a + H t) ]`.
pub fn check_theorem1(
    problem: &QuadraticProblem,
    a: f64,
    config: &CheckConfig,
) -> Result<BoundTrace, AnalysisError> {
    let h = problem.strength();
    let gamma = problem.gamma();
    let threshold = 1.0 / gamma - h;
    if !(a >= threshold - 1e-12 * threshold.abs()) || !(a + h > 0.0) {
        return Err(AnalysisError::Inadmissible(format!(
            "a ≥ 1/γ − H violated: a = {a}, 1/γ − H = {threshold}"
        )));
    }
    let reps = simulate(problem, &StepSchedule::InverseAPlusHt { a, h }, config)?;
    let w_star_sq = norm_sq(problem.optimum());
    let rows = summarize(
        &reps,
        config.slack,
        |r, t| {
            let tf = t as f64;
            let avg = r.sub[..t].iter().sum::<f64>() / tf;
            let noise: f64 = r.var[..t]
                .iter()
                .enumerate()
                .map(|(s, v)| v / (a + h * (s + 1) as f64))
                .sum();
            (avg, (0.5 * a * w_star_sq + noise) / tf)
        },
        config.steps,
    );
    Ok(BoundTrace {
        kind: BoundKind::Theorem1,
        strength: h,
        gamma,
        eta: None,
        a: Some(a),
        alpha: None,
        replicates: reps.len(),
        slack: config.slack,
        rows,
    })
}

/// Per-step progress inequality for `eta_t ∈ (0, gamma]`:
/// `E[P(w_(t+1)) - P(w*)] ≤ (1/(2 eta_t)) E[||w_t - w*||^2 - ||w_(t+1) - w*||^2] - (H/2) E||w_t - w*||^2 + eta_t E V_t`.
pub fn check_lemma1(
    problem: &QuadraticProblem,
    schedule: &StepSchedule,
    config: &CheckConfig,
) -> Result<BoundTrace, AnalysisError> {
    let h = problem.strength();
    let gamma = problem.gamma();
    for t in 1..=config.steps {
        let eta = schedule.eta(t);
        if !(eta > 0.0 && eta <= gamma) {
            return Err(AnalysisError::Inadmissible(format!(
                "η_t ∈ (0, γ] violated at t = {t}: η_t = {eta}, γ = {gamma}"
            )));
        }
    }
    let reps = simulate(problem, schedule, config)?;
    let rows = summarize(
        &reps,
        config.slack,
        |r, t| {
            let eta = schedule.eta(t);
            let (before, after) = (r.dist[t - 1], r.dist[t]);
            let rhs = (before - after) / (2.0 * eta) - 0.5 * h * before + eta * r.var[t - 1];
            (r.sub[t - 1], rhs)
        },
        config.steps,
    );
    let eta = match schedule {
        StepSchedule::Constant { eta } => Some(*eta),
        _ => None,
    };
    let a = match schedule {
        StepSchedule::InverseAPlusHt { a, .. } => Some(*a),
        _ => None,
    };
    Ok(BoundTrace {
        kind: BoundKind::Lemma1,
        strength: h,
        gamma,
        eta,
        a,
        alpha: None,
        replicates: reps.len(),
        slack: config.slack,
        rows,
    })
}

/// `<grad P(u) - grad P(v), u - v> - gamma ||grad P(u) - grad P(v)||^2`, which
/// co-coercivity makes non-negative for convex `(1/gamma)`-smooth `P`.
pub fn cocoercivity_gap<O: Objective + ?Sized>(obj: &O, gamma: f64, u: &[f64], v: &[f64]) -> f64 {
    let (gu, gv) = (obj.gradient(u), obj.gradient(v));
    let dg: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| a - b).collect();
    let inner: f64 = dg.iter().zip(u.iter().zip(v)).map(|(g, (a, b))| g * (a - b)).sum();
    inner - gamma * norm_sq(&dg)
}

/// Slack in the strongly-convex co-coercivity inequality
/// `<dg, u - v> ≥ (H/gamma)/(H + 1/gamma) ||u - v||^2 + 1/(H + 1/gamma) ||dg||^2`.
pub fn strong_cocoercivity_gap<O: Objective + ?Sized>(obj: &O, h: f64, gamma: f64, u: &[f64], v: &[f64]) -> f64 {
    let (gu, gv) = (obj.gradient(u), obj.gradient(v));
    let dg: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| a - b).collect();
    let du: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    let inner: f64 = dg.iter().zip(&du).map(|(a, b)| a * b).sum();
    let denom = h + 1.0 / gamma;
    inner - (h / gamma) / denom * norm_sq(&du) - norm_sq(&dg) / denom
}

/// `P(u) - P(w) - <grad P(w), u - w>`, non-negative for convex `P`.
pub fn convexity_gap<O: Objective + ?Sized>(obj: &O, w: &[f64], u: &[f64]) -> f64 {
    let g = obj.gradient(w);
    let lin: f64 = g.iter().zip(u.iter().zip(w)).map(|(gj, (a, b))| gj * (a - b)).sum();
    obj.value(u) - obj.value(w) - lin
}
