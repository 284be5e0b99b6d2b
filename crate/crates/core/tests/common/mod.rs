//! Brute-force oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use strata_sgd::data::{Dataset, FeatureVector};
use strata_sgd::objective::{Matrix, Model, Objective};
use strata_sgd::sampling::RngState;
use strata_sgd::synthetic::MixtureSpec;

/// Every outcome of drawing `quotas[i]` indices with replacement from each
/// `clusters[i]`, with the weights the stratified sampler uses. All outcomes
/// are equally likely.
pub fn stratified_outcomes(clusters: &[Vec<usize>], quotas: &[usize]) -> Vec<Vec<(usize, f64)>> {
    let n: usize = clusters.iter().map(Vec::len).sum();
    let mut slots: Vec<(&[usize], f64)> = Vec::new();
    for (c, &b) in clusters.iter().zip(quotas) {
        let w = c.len() as f64 / (b * n) as f64;
        for _ in 0..b {
            slots.push((c, w));
        }
    }
    let mut out = Vec::new();
    let mut digits = vec![0usize; slots.len()];
    loop {
        out.push(slots.iter().zip(&digits).map(|((c, w), &d)| (c[d], *w)).collect());
        let mut pos = 0;
        loop {
            if pos == slots.len() {
                return out;
            }
            digits[pos] += 1;
            if digits[pos] < slots[pos].0.len() {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// All `n^b` ordered uniform draws, each weighted `1/b`.
pub fn uniform_outcomes(n: usize, b: usize) -> Vec<Vec<(usize, f64)>> {
    stratified_outcomes(&[(0..n).collect()], &[b])
}

/// `(E g, E ||g - grad P||^2)` over equally likely outcomes.
pub fn enumerate_moments<O: Objective>(obj: &O, w: &[f64], outcomes: &[Vec<(usize, f64)>]) -> (Vec<f64>, f64) {
    let full = obj.gradient(w);
    let p = obj.num_params();
    let mut mean = vec![0.0; p];
    let mut var = 0.0;
    for o in outcomes {
        let mut g = vec![0.0; p];
        obj.add_batch_gradient(w, o, &mut g);
        for (m, gj) in mean.iter_mut().zip(&g) {
            *m += gj;
        }
        var += g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let k = outcomes.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    (mean, var / k)
}

/// Exhaustive minimum of `sum_i n_i^2 v_i / b_i` over integer `b_i ≥ 1` summing to `b`.
pub fn exhaustive_allocation(sizes: &[usize], disp: &[f64], b: usize) -> (Vec<usize>, f64) {
    fn rec(
        i: usize,
        left: usize,
        sizes: &[usize],
        disp: &[f64],
        cur: &mut Vec<usize>,
        best: &mut (Vec<usize>, f64),
    ) {
        let k = sizes.len();
        if i == k - 1 {
            cur.push(left);
            let obj: f64 = (0..k)
                .map(|j| (sizes[j] * sizes[j]) as f64 * disp[j] / cur[j] as f64)
                .sum();
            if obj < best.1 {
                *best = (cur.clone(), obj);
            }
            cur.pop();
            return;
        }
        for q in 1..=left - (k - 1 - i) {
            cur.push(q);
            rec(i + 1, left - q, sizes, disp, cur, best);
            cur.pop();
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    rec(0, b, sizes, disp, &mut Vec::new(), &mut best);
    best
}

/// Central finite-difference gradient.
pub fn numeric_gradient<O: Objective>(obj: &O, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|j| {
            let orig = x[j];
            x[j] = orig + h;
            let up = obj.value(&x);
            x[j] = orig - h;
            let down = obj.value(&x);
            x[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

/// Dense dataset with uniform features in `[-1, 1]` and the given labels.
pub fn random_dataset(rng: &mut RngState, labels: &[i64], d: usize) -> Dataset {
    let rows: Vec<(FeatureVector, i64)> = labels
        .iter()
        .map(|&l| {
            let dense: Vec<f64> = (0..d).map(|_| 2.0 * rng.unit() - 1.0).collect();
            (FeatureVector::from_dense(&dense), l)
        })
        .collect();
    Dataset::from_labeled(rows, d).unwrap()
}

pub fn random_model(rng: &mut RngState, m: usize, d: usize, lambda: f64, scale: f64) -> Model {
    Model {
        weights: Matrix::from_vec(m, d, (0..m * d).map(|_| scale * rng.normal()).collect()),
        lambda,
    }
}

/// Random partition of `0..n` into `k` non-empty clusters, plus per-point
/// labels that are constant on each cluster.
pub fn random_partition(rng: &mut RngState, n: usize, k: usize, classes: usize) -> (Vec<Vec<usize>>, Vec<i64>) {
    assert!(k >= 1 && k <= n);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    let mut clusters: Vec<Vec<usize>> = (0..k).map(|i| vec![perm[i]]).collect();
    for &s in &perm[k..] {
        clusters[rng.below(k)].push(s);
    }
    let mut labels = vec![0i64; n];
    for c in &clusters {
        let l = rng.below(classes) as i64 + 1;
        for &s in c {
            labels[s] = l;
        }
    }
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    (clusters, labels)
}

/// Writes the pendigits-shaped synthetic train/test pair as LIBSVM files.
pub fn write_synthetic_pendigits(dir: &Path, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    let (train, test) = MixtureSpec::pendigits_like(seed).generate().unwrap();
    let (tr, te) = (dir.join("synthetic_pendigits"), dir.join("synthetic_pendigits.t"));
    std::fs::write(&tr, train.to_libsvm()).unwrap();
    std::fs::write(&te, test.to_libsvm()).unwrap();
    (tr, te)
}
