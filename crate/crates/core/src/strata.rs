//! Label-pure stratifications of the training set and their minibatch quotas.
//!
//! A stratification splits the instance indices into `k` clusters, each holding
//! a single class. For cluster `i` with `n_i` members, centroid `mu_i` and
//! dispersion `v_i = mean ||x_s - mu_i||^2`, the feature-space variance
//! surrogate at quotas `b_i` is `sum_i (n_i^2 / b_i) v_i`. Its continuous
//! minimizer is the Neyman allocation `b_i ∝ n_i sqrt(v_i)`, and substituting
//! it back leaves `sum_i n_i sqrt(v_i)` as the clustering objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::sampling::RngState;

#[derive(Debug, Error, PartialEq)]
pub enum StrataError {
    #[error("k = {k} is smaller than the class count m = {m}")]
    TooFewClusters { k: usize, m: usize },
    #[error("k = {k} exceeds the instance count n = {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("empty dataset")]
    Empty,
    #[error("minibatch size b = {b} is smaller than the cluster count k = {k}")]
    BatchTooSmall { b: usize, k: usize },
    #[error("invalid stratification: {0}")]
    Invalid(String),
}

/// Anything whose members can be clustered: a labeled set of dense points.
pub trait PointSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    /// Overwrites `out` (length `dim()`) with point `i`.
    fn write_point(&self, i: usize, out: &mut [f64]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_point(i, &mut out);
        out
    }
}

impl PointSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn dim(&self) -> usize {
        Dataset::dim(self)
    }

    fn label(&self, i: usize) -> usize {
        self.instance(i).label
    }

    fn write_point(&self, i: usize, out: &mut [f64]) {
        self.instance(i).features.write_dense(out);
    }
}

/// Dense points with explicit labels.
#[derive(Debug, Clone)]
pub struct DensePoints<'a> {
    pub rows: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

impl PointSource for DensePoints<'_> {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn write_point(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.rows[i]);
    }
}

/// Label-pure partition of `0..n` with per-cluster centroids and dispersions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    clusters: Vec<Vec<usize>>,
    centroids: Vec<Vec<f64>>,
    dispersions: Vec<f64>,
    labels: Vec<usize>,
}

/// Per-cluster minibatch quotas `b_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    quotas: Vec<usize>,
}

impl Allocation {
    pub fn new(quotas: Vec<usize>) -> Result<Self, StrataError> {
        if quotas.is_empty() || quotas.contains(&0) {
            return Err(StrataError::Invalid("every quota must be at least 1".into()));
        }
        Ok(Self { quotas })
    }

    pub fn quotas(&self) -> &[usize] {
        &self.quotas
    }

    pub fn total(&self) -> usize {
        self.quotas.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.quotas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotas.is_empty()
    }
}

impl Stratification {
    /// Builds a stratification from cluster index lists, checking that they
    /// partition the points and are label-pure. Members are sorted ascending.
    pub fn from_clusters<P: PointSource + ?Sized>(
        points: &P,
        mut clusters: Vec<Vec<usize>>,
    ) -> Result<Self, StrataError> {
        for c in &mut clusters {
            c.sort_unstable();
        }
        let labels = check_partition(points, &clusters)?;
        let mut centroids = Vec::with_capacity(clusters.len());
        let mut dispersions = Vec::with_capacity(clusters.len());
        for c in &clusters {
            let (mu, v) = centroid_and_dispersion(points, c);
            centroids.push(mu);
            dispersions.push(v);
        }
        Ok(Self {
            clusters,
            centroids,
            dispersions,
            labels,
        })
    }

    /// Checks an imported stratification against the points it claims to describe.
    pub fn validate<P: PointSource + ?Sized>(&self, points: &P) -> Result<(), StrataError> {
        let k = self.clusters.len();
        if self.centroids.len() != k || self.dispersions.len() != k || self.labels.len() != k {
            return Err(StrataError::Invalid("array lengths disagree".into()));
        }
        let labels = check_partition(points, &self.clusters)?;
        if labels != self.labels {
            return Err(StrataError::Invalid("cluster labels disagree with data".into()));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            let (mu, v) = centroid_and_dispersion(points, c);
            if self.centroids[i].len() != mu.len() {
                return Err(StrataError::Invalid(format!("centroid {i} has wrong dimension")));
            }
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
            if !close(self.dispersions[i], v)
                || self.centroids[i].iter().zip(&mu).any(|(a, b)| !close(*a, *b))
            {
                return Err(StrataError::Invalid(format!(
                    "cluster {i}: centroid or dispersion does not match the data"
                )));
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn dispersions(&self) -> &[f64] {
        &self.dispersions
    }

    /// Dense class id of each cluster.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_points(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// `sum_i n_i sqrt(v_i)`.
    pub fn objective(&self) -> f64 {
        self.clusters
            .iter()
            .zip(&self.dispersions)
            .map(|(c, v)| c.len() as f64 * v.sqrt())
            .sum()
    }

    /// The feature-space variance surrogate `sum_i (n_i^2 / b_i) v_i`.
    pub fn surrogate_variance(&self, quotas: &[usize]) -> f64 {
        self.clusters
            .iter()
            .zip(&self.dispersions)
            .zip(quotas)
            .map(|((c, v), &b)| {
                let n = c.len() as f64;
                n * n / b as f64 * v
            })
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stratification serializes")
    }

    /// Parses the JSON form. Structure is checked; call [`validate`](Self::validate)
    /// to check it against a dataset.
    pub fn from_json(text: &str) -> Result<Self, StrataError> {
        let s: Self = serde_json::from_str(text).map_err(|e| StrataError::Invalid(e.to_string()))?;
        let k = s.clusters.len();
        if k == 0 || s.centroids.len() != k || s.dispersions.len() != k || s.labels.len() != k {
            return Err(StrataError::Invalid("array lengths disagree".into()));
        }
        Ok(s)
    }
}

fn check_partition<P: PointSource + ?Sized>(
    points: &P,
    clusters: &[Vec<usize>],
) -> Result<Vec<usize>, StrataError> {
    let n = points.len();
    let mut seen = vec![false; n];
    let mut labels = Vec::with_capacity(clusters.len());
    for (ci, c) in clusters.iter().enumerate() {
        let Some(&first) = c.first() else {
            return Err(StrataError::Invalid(format!("cluster {ci} is empty")));
        };
        if first >= n {
            return Err(StrataError::Invalid(format!("index {first} out of range")));
        }
        let label = points.label(first);
        for &s in c {
            if s >= n {
                return Err(StrataError::Invalid(format!("index {s} out of range")));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(StrataError::Invalid(format!("index {s} appears twice")));
            }
            if points.label(s) != label {
                return Err(StrataError::Invalid(format!("cluster {ci} mixes labels")));
            }
        }
        labels.push(label);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(StrataError::Invalid(format!("index {missing} is not in any cluster")));
    }
    Ok(labels)
}

/// Mean and mean squared distance to the mean. The mean is accumulated as an
/// offset from the first member so identical points give exactly zero.
fn centroid_and_dispersion<P: PointSource + ?Sized>(points: &P, members: &[usize]) -> (Vec<f64>, f64) {
    let d = points.dim();
    let n = members.len() as f64;
    let base = points.point(members[0]);
    let mut buf = vec![0.0; d];
    let mut offset = vec![0.0; d];
    for &s in &members[1..] {
        points.write_point(s, &mut buf);
        for j in 0..d {
            offset[j] += buf[j] - base[j];
        }
    }
    let mu: Vec<f64> = base.iter().zip(&offset).map(|(b, o)| b + o / n).collect();
    let mut sse = 0.0;
    for &s in members {
        points.write_point(s, &mut buf);
        sse += sq_dist(&buf, &mu);
    }
    (mu, sse / n)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Integer apportionment of `total` over items with weights, each item in
/// `[1, cap_i]`.
///
/// Items whose proportional share falls below 1 (or above their cap) are
/// pinned there and the rest is re-shared over the remaining items. When all
/// remaining weights are zero the `fallback` weights are used instead. Final
/// rounding is largest remainder, ties to the lower index.
pub(crate) fn apportion(total: usize, weights: &[f64], fallback: &[f64], caps: Option<&[usize]>) -> Vec<usize> {
    let k = weights.len();
    debug_assert!(total >= k);
    let mut fixed: Vec<Option<usize>> = vec![None; k];
    loop {
        let free: Vec<usize> = (0..k).filter(|&i| fixed[i].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let remaining = total - fixed.iter().flatten().sum::<usize>();
        let mut w = weights;
        let mut wsum: f64 = free.iter().map(|&i| w[i]).sum();
        if !(wsum > 0.0) {
            w = fallback;
            wsum = free.iter().map(|&i| w[i]).sum();
        }
        let ideal: Vec<f64> = free.iter().map(|&i| remaining as f64 * w[i] / wsum).collect();

        let low: Vec<usize> = free
            .iter()
            .zip(&ideal)
            .filter(|(_, &q)| q < 1.0)
            .map(|(&i, _)| i)
            .collect();
        if !low.is_empty() {
            for i in low {
                fixed[i] = Some(1);
            }
            continue;
        }
        if let Some(caps) = caps {
            let high: Vec<usize> = free
                .iter()
                .zip(&ideal)
                .filter(|(&i, &q)| q > caps[i] as f64)
                .map(|(&i, _)| i)
                .collect();
            if !high.is_empty() {
                for i in high {
                    fixed[i] = Some(caps[i]);
                }
                continue;
            }
        }

        let mut assigned: Vec<usize> = ideal.iter().map(|q| q.floor() as usize).collect();
        let mut leftover = remaining - assigned.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..free.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = ideal[a] - ideal[a].floor();
            let fb = ideal[b] - ideal[b].floor();
            fb.total_cmp(&fa).then(free[a].cmp(&free[b]))
        });
        while leftover > 0 {
            let before = leftover;
            for &j in &order {
                if leftover == 0 {
                    break;
                }
                let room = caps.is_none_or(|c| assigned[j] < c[free[j]]);
                if room {
                    assigned[j] += 1;
                    leftover -= 1;
                }
            }
            assert!(leftover < before, "apportionment is infeasible");
        }
        for (j, &i) in free.iter().enumerate() {
            fixed[i] = Some(assigned[j]);
        }
        break;
    }
    fixed.into_iter().map(|q| q.expect("all items assigned")).collect()
}

/// Integer quotas with `b_i ≥ 1` summing to `b`, approximating
/// `b_i ∝ n_i sqrt(v_i)`.
///
/// Zero-dispersion clusters get a floor quota of one draw; the remaining
/// budget is re-shared by the same rule over the other clusters.
pub fn neyman_allocation(strat: &Stratification, b: usize) -> Result<Allocation, StrataError> {
    let k = strat.num_clusters();
    if b < k {
        return Err(StrataError::BatchTooSmall { b, k });
    }
    let weights: Vec<f64> = strat
        .clusters
        .iter()
        .zip(&strat.dispersions)
        .map(|(c, v)| c.len() as f64 * v.sqrt())
        .collect();
    let sizes: Vec<f64> = strat.clusters.iter().map(|c| c.len() as f64).collect();
    Allocation::new(apportion(b, &weights, &sizes, None))
}

/// Proportional allocation `b_i = b n_i / n`, when every quota is a positive integer.
pub fn proportional_allocation(strat: &Stratification, b: usize) -> Option<Allocation> {
    let n = strat.num_points();
    let mut quotas = Vec::with_capacity(strat.num_clusters());
    for c in &strat.clusters {
        let num = b * c.len();
        if !num.is_multiple_of(n) || num == 0 {
            return None;
        }
        quotas.push(num / n);
    }
    Allocation::new(quotas).ok()
}

/// Cluster budget per class: proportional to class size, at least one per
/// class and at most the class size.
pub fn class_budgets(class_counts: &[usize], k: usize) -> Result<Vec<usize>, StrataError> {
    let m = class_counts.len();
    let n: usize = class_counts.iter().sum();
    if n == 0 || class_counts.contains(&0) {
        return Err(StrataError::Empty);
    }
    if k < m {
        return Err(StrataError::TooFewClusters { k, m });
    }
    if k > n {
        return Err(StrataError::TooManyClusters { k, n });
    }
    let weights: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
    Ok(apportion(k, &weights, &weights, Some(class_counts)))
}

/// Settings for per-class Lloyd iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the largest centroid move is below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            seed: 1,
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

/// Result of a single Lloyd run.
#[derive(Debug, Clone)]
pub struct LloydOutcome {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after the first assignment and after each iteration.
    pub sse_trace: Vec<f64>,
}

/// Lloyd's k-means on dense points with k-means++ seeding.
///
/// Every returned cluster is non-empty: an empty cluster takes the point
/// farthest from its current centroid (among clusters with at least two
/// members) and is re-centred on it. Ties go to the lowest index.
pub fn lloyd(points: &[Vec<f64>], k: usize, params: &KMeansParams, rng: &mut RngState) -> LloydOutcome {
    let n = points.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignment = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut sse_trace = Vec::new();

    for iter in 0..params.max_iters.max(1) {
        for (s, p) in points.iter().enumerate() {
            let (best, d) = nearest(p, &centroids);
            assignment[s] = best;
            dist[s] = d;
        }
        if iter == 0 {
            sse_trace.push(dist.iter().sum());
        }
        repair_empty(&mut assignment, &mut dist, &mut centroids, points);

        let new = cluster_means(points, &assignment, k);
        let shift = new
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new;
        sse_trace.push(
            points
                .iter()
                .zip(&assignment)
                .map(|(p, &c)| sq_dist(p, &centroids[c]))
                .sum(),
        );
        if shift < params.tol {
            break;
        }
    }
    LloydOutcome {
        assignment,
        centroids,
        sse_trace,
    }
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.unit() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (s, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = Some(s);
                    if acc > r {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a centroid
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        for (s, p) in points.iter().enumerate() {
            d2[s] = d2[s].min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

fn repair_empty(assignment: &mut [usize], dist: &mut [f64], centroids: &mut [Vec<f64>], points: &[Vec<f64>]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for s in 0..assignment.len() {
            if sizes[assignment[s]] >= 2 && donor.is_none_or(|d| dist[s] > dist[d]) {
                donor = Some(s);
            }
        }
        let s = donor.expect("k <= n leaves a cluster with two members");
        sizes[assignment[s]] -= 1;
        sizes[empty] = 1;
        assignment[s] = empty;
        dist[s] = 0.0;
        centroids[empty] = points[s].clone();
    }
}

fn cluster_means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, Vec::len);
    let mut first: Vec<Option<usize>> = vec![None; k];
    let mut offset = vec![vec![0.0; d]; k];
    let mut count = vec![0usize; k];
    for (s, &c) in assignment.iter().enumerate() {
        count[c] += 1;
        match first[c] {
            None => first[c] = Some(s),
            Some(f) => {
                for j in 0..d {
                    offset[c][j] += points[s][j] - points[f][j];
                }
            }
        }
    }
    (0..k)
        .map(|c| {
            let f = first[c].expect("clusters are non-empty after repair");
            points[f]
                .iter()
                .zip(&offset[c])
                .map(|(b, o)| b + o / count[c] as f64)
                .collect()
        })
        .collect()
}

/// Standard k-means run separately inside each class.
///
/// The `k` clusters are split across classes by [`class_budgets`]. Clusters
/// are ordered by class id, then by their order within the class.
pub fn per_class_kmeans<P: PointSource + ?Sized>(
    points: &P,
    k: usize,
    params: &KMeansParams,
) -> Result<Stratification, StrataError> {
    if points.is_empty() {
        return Err(StrataError::Empty);
    }
    let by_class = members_by_class(points);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let budgets = class_budgets(&counts, k)?;
    let mut rng = RngState::from_seed(params.seed);
    let mut clusters = Vec::with_capacity(k);
    for (members, &kc) in by_class.iter().zip(&budgets) {
        let dense: Vec<Vec<f64>> = members.iter().map(|&s| points.point(s)).collect();
        let outcome = lloyd(&dense, kc, params, &mut rng);
        let mut local = vec![Vec::new(); kc];
        for (j, &c) in outcome.assignment.iter().enumerate() {
            local[c].push(members[j]);
        }
        clusters.extend(local);
    }
    Stratification::from_clusters(points, clusters)
}

fn members_by_class<P: PointSource + ?Sized>(points: &P) -> Vec<Vec<usize>> {
    let m = (0..points.len()).map(|i| points.label(i)).max().map_or(0, |l| l + 1);
    let mut by_class = vec![Vec::new(); m];
    for i in 0..points.len() {
        by_class[points.label(i)].push(i);
    }
    by_class
}

#[inline]
fn weighted_cost(n: usize, sse: f64) -> f64 {
    (n as f64 * sse.max(0.0)).sqrt()
}

/// Local search on `sum_i sqrt(n_i * SSE_i)` (equal to `sum_i n_i sqrt(v_i)`).
///
/// Centroids always sit at cluster means, which minimize each SSE for a fixed
/// assignment. Each pass visits points in index order and moves a point to the
/// same-label cluster giving the largest strict decrease of the objective, if
/// any. Stops after a pass without moves or after `max_passes` passes. The
/// result never has a larger objective than the input.
pub fn refine_weighted<P: PointSource + ?Sized>(
    strat: &Stratification,
    points: &P,
    max_passes: usize,
) -> Result<Stratification, StrataError> {
    strat.validate(points)?;
    let k = strat.num_clusters();
    let mut owner = vec![0usize; points.len()];
    for (c, members) in strat.clusters.iter().enumerate() {
        for &s in members {
            owner[s] = c;
        }
    }
    let mut sizes = strat.sizes();
    let mut means = strat.centroids.clone();
    let mut sse: Vec<f64> = (0..k).map(|c| sizes[c] as f64 * strat.dispersions[c]).collect();

    let m = strat.labels.iter().max().map_or(0, |l| l + 1);
    let mut same_label: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (c, &l) in strat.labels.iter().enumerate() {
        same_label[l].push(c);
    }

    let mut any_move = false;
    let mut x = vec![0.0; points.dim()];
    for _ in 0..max_passes {
        let mut moved = false;
        let scale = strat.objective().max(1.0);
        for s in 0..points.len() {
            let a = owner[s];
            if sizes[a] < 2 {
                continue;
            }
            points.write_point(s, &mut x);
            let na = sizes[a];
            let da = sq_dist(&x, &means[a]);
            let sse_a = sse[a] - na as f64 / (na - 1) as f64 * da;
            let base_a = weighted_cost(na, sse[a]);
            let after_a = weighted_cost(na - 1, sse_a);

            let mut best: Option<(usize, f64, f64)> = None;
            for &bc in &same_label[points.label(s)] {
                if bc == a {
                    continue;
                }
                let nb = sizes[bc];
                let db = sq_dist(&x, &means[bc]);
                let sse_b = sse[bc] + nb as f64 / (nb + 1) as f64 * db;
                let delta = after_a + weighted_cost(nb + 1, sse_b) - base_a - weighted_cost(nb, sse[bc]);
                if delta < -1e-12 * scale && best.is_none_or(|(_, d, _)| delta < d) {
                    best = Some((bc, delta, sse_b));
                }
            }
            let Some((bc, _, sse_b)) = best else { continue };

            let na_f = na as f64;
            for (mu, &xj) in means[a].iter_mut().zip(&x) {
                *mu = (na_f * *mu - xj) / (na_f - 1.0);
            }
            let nb_f = sizes[bc] as f64;
            for (mu, &xj) in means[bc].iter_mut().zip(&x) {
                *mu += (xj - *mu) / (nb_f + 1.0);
            }
            sse[a] = sse_a.max(0.0);
            sse[bc] = sse_b;
            sizes[a] -= 1;
            sizes[bc] += 1;
            owner[s] = bc;
            moved = true;
            any_move = true;
        }
        if !moved {
            break;
        }
        // resync incremental statistics
        let current = rebuild(points, &owner, k)?;
        for c in 0..k {
            means[c].clone_from(&current.centroids[c]);
            sse[c] = sizes[c] as f64 * current.dispersions[c];
        }
    }
    if !any_move {
        return Ok(strat.clone());
    }
    let refined = rebuild(points, &owner, k)?;
    if refined.objective() > strat.objective() {
        return Ok(strat.clone());
    }
    Ok(refined)
}

fn rebuild<P: PointSource + ?Sized>(points: &P, owner: &[usize], k: usize) -> Result<Stratification, StrataError> {
    let mut clusters = vec![Vec::new(); k];
    for (s, &c) in owner.iter().enumerate() {
        clusters[c].push(s);
    }
    Stratification::from_clusters(points, clusters)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64], labels: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        (xs.iter().map(|&x| vec![x]).collect(), labels.to_vec())
    }

    #[test]
    fn objective_of_two_points() {
        let (rows, labels) = line(&[0.0, 2.0], &[0, 0]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1]]).unwrap();
        assert_eq!(s.centroids(), &[vec![1.0]]);
        assert_eq!(s.dispersions(), &[1.0]);
        assert_eq!(s.objective(), 2.0);
    }

    #[test]
    fn identical_points_have_zero_dispersion() {
        let rows = vec![vec![0.1, 0.7]; 3];
        let labels = vec![0; 3];
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1, 2]]).unwrap();
        assert_eq!(s.dispersions(), &[0.0]);
        assert_eq!(s.objective(), 0.0);
    }

    #[test]
    fn from_clusters_rejects_bad_partitions() {
        let (rows, labels) = line(&[0.0, 1.0, 2.0], &[0, 0, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let bad = [
            vec![vec![0, 1], vec![]],
            vec![vec![0, 1]],
            vec![vec![0, 1], vec![1, 2]],
            vec![vec![0, 1, 2]],
            vec![vec![0, 1], vec![2, 7]],
        ];
        for clusters in bad {
            assert!(matches!(
                Stratification::from_clusters(&pts, clusters),
                Err(StrataError::Invalid(_))
            ));
        }
    }

    #[test]
    fn neyman_exact_formula() {
        // n = (4, 2), v = (4, 1): weights 8 and 2, b = 5
        let (rows, labels) = line(&[-2.0, -2.0, 2.0, 2.0, 10.0, 12.0], &[0, 0, 0, 0, 1, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1, 2, 3], vec![4, 5]]).unwrap();
        assert_eq!(s.dispersions(), &[4.0, 1.0]);
        assert_eq!(neyman_allocation(&s, 5).unwrap().quotas(), &[4, 1]);
    }

    #[test]
    fn neyman_tie_rule() {
        let (rows, labels) = line(&[0.0, 1.0, 2.0, 10.0, 11.0, 12.0, 20.0, 21.0, 22.0], &[0; 9]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]])
            .unwrap();
        assert_eq!(neyman_allocation(&s, 10).unwrap().quotas(), &[4, 3, 3]);
        assert_eq!(neyman_allocation(&s, 9).unwrap().quotas(), &[3, 3, 3]);
        assert_eq!(
            neyman_allocation(&s, 2),
            Err(StrataError::BatchTooSmall { b: 2, k: 3 })
        );
    }

    #[test]
    fn zero_dispersion_gets_one_draw() {
        let (rows, labels) = line(&[5.0, 5.0, 5.0, 0.0, 4.0], &[0, 0, 0, 1, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1, 2], vec![3, 4]]).unwrap();
        assert_eq!(neyman_allocation(&s, 6).unwrap().quotas(), &[1, 5]);
        // all dispersions zero: leftover budget follows cluster sizes
        let (rows, labels) = line(&[1.0, 1.0, 1.0, 2.0], &[0, 0, 0, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1, 2], vec![3]]).unwrap();
        let a = neyman_allocation(&s, 6).unwrap();
        // shares 4.5 and 1.5: equal remainders, lower index wins
        assert_eq!(a.quotas(), &[5, 1]);
    }

    #[test]
    fn class_budget_rules() {
        assert_eq!(class_budgets(&[4, 1], 3).unwrap(), vec![2, 1]);
        assert_eq!(class_budgets(&[5, 5], 3).unwrap(), vec![2, 1]);
        assert_eq!(class_budgets(&[3, 1, 2], 6).unwrap(), vec![3, 1, 2]);
        assert_eq!(class_budgets(&[100, 1, 1], 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(class_budgets(&[10, 2], 11).unwrap(), vec![9, 2]);
        assert_eq!(
            class_budgets(&[2, 2], 1),
            Err(StrataError::TooFewClusters { k: 1, m: 2 })
        );
        assert_eq!(
            class_budgets(&[2, 2], 5),
            Err(StrataError::TooManyClusters { k: 5, n: 4 })
        );
    }

    #[test]
    fn proportional_only_when_integral() {
        let (rows, labels) = line(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &[0, 0, 0, 0, 1, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1, 2, 3], vec![4, 5]]).unwrap();
        assert_eq!(proportional_allocation(&s, 3).unwrap().quotas(), &[2, 1]);
        assert!(proportional_allocation(&s, 4).is_none());
        assert!(proportional_allocation(&s, 1).is_none());
    }

    #[test]
    fn lloyd_duplicates_still_fill_every_cluster() {
        let points = vec![vec![1.0], vec![1.0], vec![3.0]];
        for seed in 0..20 {
            let out = lloyd(&points, 3, &KMeansParams::default(), &mut RngState::from_seed(seed));
            let mut sizes = [0; 3];
            for &c in &out.assignment {
                sizes[c] += 1;
            }
            assert_eq!(sizes, [1, 1, 1]);
            assert_eq!(*out.sse_trace.last().unwrap(), 0.0);
        }
        let points = vec![vec![2.0]; 4];
        let out = lloyd(&points, 2, &KMeansParams::default(), &mut RngState::from_seed(0));
        assert!(out.assignment.contains(&0) && out.assignment.contains(&1));
    }

    #[test]
    fn per_class_kmeans_errors() {
        let (rows, labels) = line(&[0.0, 1.0, 2.0], &[0, 1, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let p = KMeansParams::default();
        assert_eq!(
            per_class_kmeans(&pts, 1, &p),
            Err(StrataError::TooFewClusters { k: 1, m: 2 })
        );
        assert_eq!(
            per_class_kmeans(&pts, 4, &p),
            Err(StrataError::TooManyClusters { k: 4, n: 3 })
        );
        let empty: Vec<Vec<f64>> = vec![];
        let pts = DensePoints { rows: &empty, labels: &[] };
        assert_eq!(per_class_kmeans(&pts, 1, &p), Err(StrataError::Empty));
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let (rows, labels) = line(&[0.3, 1.0, 2.5, 7.0, 7.5], &[0, 1, 0, 1, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = per_class_kmeans(&pts, 5, &KMeansParams::default()).unwrap();
        assert!(s.sizes().iter().all(|&n| n == 1));
        assert!(s.dispersions().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn json_roundtrip() {
        let (rows, labels) = line(&[0.0, 1.0, 9.0, 10.0, 5.0], &[0, 0, 0, 0, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = per_class_kmeans(&pts, 3, &KMeansParams::default()).unwrap();
        let back = Stratification::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        back.validate(&pts).unwrap();
        let json = s.to_json();
        for key in ["clusters", "centroids", "dispersions", "labels"] {
            assert!(json.contains(&format!("\"{key}\"")));
        }
        assert!(Stratification::from_json("{\"clusters\": []}").is_err());
    }

    #[test]
    fn validate_catches_tampering() {
        let (rows, labels) = line(&[0.0, 1.0, 5.0], &[0, 0, 1]);
        let pts = DensePoints { rows: &rows, labels: &labels };
        let s = Stratification::from_clusters(&pts, vec![vec![0, 1], vec![2]]).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        json["dispersions"][0] = serde_json::json!(0.5);
        let tampered = Stratification::from_json(&json.to_string()).unwrap();
        assert!(tampered.validate(&pts).is_err());
    }
}
