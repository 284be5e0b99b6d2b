//! Weighted minibatch sampling, uniform or stratified, always with replacement.
//!
//! Every draw carries the importance weight that makes the weighted sum of
//! per-example gradients an unbiased estimate of the full gradient:
//! `1/b` for uniform draws and `n_i / (b_i * n)` for a draw from stratum `i`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::strata::{Allocation, Stratification};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("minibatch size must be at least 1")]
    EmptyBatch,
    #[error("population must be non-empty")]
    EmptyPopulation,
    #[error("allocation has {quotas} quotas but there are {clusters} clusters")]
    MismatchedClusters { quotas: usize, clusters: usize },
    #[error("cluster {0} has a zero quota or is empty")]
    EmptyStratum(usize),
}

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`, whose output is fixed
/// across platforms and crate releases. Integers in `[0, n)` are drawn by
/// rejection from the full 64-bit range, so they carry no modulo bias.
#[derive(Debug, Clone)]
pub struct RngState {
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        let n = n as u64;
        // 2^64 mod n; values below it are rejected
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.inner.next_u64();
            if x >= threshold {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform double in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Drawn instance indices with their importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub draws: Vec<(usize, f64)>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.draws.iter().map(|d| d.1).sum()
    }
}

/// `b` i.i.d. uniform draws from `[0, n)`, each weighted `1/b`.
pub fn draw_uniform(n: usize, b: usize, rng: &mut RngState) -> Result<Minibatch, SamplingError> {
    if b == 0 {
        return Err(SamplingError::EmptyBatch);
    }
    if n == 0 {
        return Err(SamplingError::EmptyPopulation);
    }
    let w = 1.0 / b as f64;
    Ok(Minibatch {
        draws: (0..b).map(|_| (rng.below(n), w)).collect(),
    })
}

/// `b_i` i.i.d. uniform draws from each cluster, cluster by cluster in index order.
pub fn draw_stratified(
    strat: &Stratification,
    alloc: &Allocation,
    rng: &mut RngState,
) -> Result<Minibatch, SamplingError> {
    StratifiedPlan::new(strat.clusters(), alloc.quotas())?.draw(rng)
}

/// Precomputed clusters, quotas and weights for repeated stratified draws.
#[derive(Debug, Clone)]
pub struct StratifiedPlan<'a> {
    clusters: &'a [Vec<usize>],
    quotas: &'a [usize],
    weights: Vec<f64>,
    batch: usize,
}

impl<'a> StratifiedPlan<'a> {
    pub fn new(clusters: &'a [Vec<usize>], quotas: &'a [usize]) -> Result<Self, SamplingError> {
        if clusters.len() != quotas.len() {
            return Err(SamplingError::MismatchedClusters {
                quotas: quotas.len(),
                clusters: clusters.len(),
            });
        }
        if clusters.is_empty() {
            return Err(SamplingError::EmptyPopulation);
        }
        if let Some(i) = (0..clusters.len()).find(|&i| clusters[i].is_empty() || quotas[i] == 0) {
            return Err(SamplingError::EmptyStratum(i));
        }
        let n: usize = clusters.iter().map(Vec::len).sum();
        let weights = clusters
            .iter()
            .zip(quotas)
            .map(|(c, &b)| (c.len() as f64 / n as f64) / b as f64)
            .collect();
        Ok(Self {
            clusters,
            quotas,
            weights,
            batch: quotas.iter().sum(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn clusters(&self) -> &'a [Vec<usize>] {
        self.clusters
    }

    pub fn quotas(&self) -> &'a [usize] {
        self.quotas
    }

    pub fn draw(&self, rng: &mut RngState) -> Result<Minibatch, SamplingError> {
        let mut draws = Vec::with_capacity(self.batch);
        for ((cluster, &quota), &w) in self.clusters.iter().zip(self.quotas).zip(&self.weights) {
            for _ in 0..quota {
                draws.push((cluster[rng.below(cluster.len())], w));
            }
        }
        Ok(Minibatch { draws })
    }
}

/// A minibatch source owned by a training run.
#[derive(Debug, Clone)]
pub enum Sampler<'a> {
    Uniform { n: usize, batch: usize },
    Stratified(StratifiedPlan<'a>),
}

impl<'a> Sampler<'a> {
    pub fn uniform(n: usize, batch: usize) -> Result<Self, SamplingError> {
        if batch == 0 {
            return Err(SamplingError::EmptyBatch);
        }
        if n == 0 {
            return Err(SamplingError::EmptyPopulation);
        }
        Ok(Sampler::Uniform { n, batch })
    }

    pub fn stratified(clusters: &'a [Vec<usize>], quotas: &'a [usize]) -> Result<Self, SamplingError> {
        StratifiedPlan::new(clusters, quotas).map(Sampler::Stratified)
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Sampler::Uniform { batch, .. } => *batch,
            Sampler::Stratified(plan) => plan.batch_size(),
        }
    }

    pub fn draw(&self, rng: &mut RngState) -> Result<Minibatch, SamplingError> {
        match self {
            Sampler::Uniform { n, batch } => draw_uniform(*n, *batch, rng),
            Sampler::Stratified(plan) => plan.draw(rng),
        }
    }
}
