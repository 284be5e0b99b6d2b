//! Training objectives `P(w) = (1/n) sum_i phi_i(w)`.
//!
//! Two families share the [`Objective`] contract:
//! - L2-regularized multiclass logistic regression over a [`Dataset`], with
//!   `phi_i(W) = -log softmax(W x_i)[y_i] + (lambda/2) ||W||_F^2`;
//! - an isotropic quadratic `phi_i(w) = (H/2) ||w - z_i||^2`, whose constants
//!   (`H`-strongly convex, `H`-smooth, minimizer `mean(z)`) are known exactly.

use crate::data::{Dataset, LabeledInstance};

/// A finite-sum objective over flat parameter vectors.
pub trait Objective: Sync {
    fn num_examples(&self) -> usize;
    fn num_params(&self) -> usize;

    /// `phi_i(w)`.
    fn example_value(&self, w: &[f64], i: usize) -> f64;

    /// `out += scale * grad phi_i(w)`.
    fn add_example_gradient(&self, w: &[f64], i: usize, scale: f64, out: &mut [f64]);

    /// `P(w)`.
    fn value(&self, w: &[f64]) -> f64 {
        let n = self.num_examples();
        (0..n).map(|i| self.example_value(w, i)).sum::<f64>() / n as f64
    }

    /// `grad P(w)`.
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let n = self.num_examples();
        let mut out = vec![0.0; self.num_params()];
        for i in 0..n {
            self.add_example_gradient(w, i, 1.0, &mut out);
        }
        out.iter_mut().for_each(|g| *g /= n as f64);
        out
    }

    /// `out += sum_(s, c) c * grad phi_s(w)` over weighted draws.
    fn add_batch_gradient(&self, w: &[f64], draws: &[(usize, f64)], out: &mut [f64]) {
        for &(s, c) in draws {
            self.add_example_gradient(w, s, c, out);
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Gradients have the same shape as the weights they differentiate.
pub type GradientMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius_sq(&self) -> f64 {
        norm_sq(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multiclass linear model: an `m x d` weight matrix and its L2 strength.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub weights: Matrix,
    pub lambda: f64,
}

impl Model {
    pub fn zeros(classes: usize, dim: usize, lambda: f64) -> Self {
        Self {
            weights: Matrix::zeros(classes, dim),
            lambda,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }

    /// `(lambda/2) ||W||_F^2`.
    pub fn regularizer(&self) -> f64 {
        0.5 * self.lambda * self.weights.frobenius_sq()
    }
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn scores_into(weights: &[f64], dim: usize, inst: &LabeledInstance, out: &mut [f64]) {
    for (c, s) in out.iter_mut().enumerate() {
        *s = inst.features.dot(&weights[c * dim..(c + 1) * dim]);
    }
}

/// Turns scores into probabilities in place; returns `log sum exp(scores)`.
pub fn softmax_in_place(scores: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
    max + total.ln()
}

/// Data term `-log softmax(W x)[y]` without the regularizer.
fn data_loss(weights: &[f64], classes: usize, dim: usize, inst: &LabeledInstance) -> f64 {
    let mut scores = vec![0.0; classes];
    scores_into(weights, dim, inst, &mut scores);
    let true_score = scores[inst.label];
    let lse = softmax_in_place(&mut scores);
    lse - true_score
}

/// `out += scale * (p - e_y) x^T`.
fn add_data_gradient(
    weights: &[f64],
    classes: usize,
    dim: usize,
    inst: &LabeledInstance,
    scale: f64,
    out: &mut [f64],
    probs: &mut Vec<f64>,
) {
    probs.resize(classes, 0.0);
    scores_into(weights, dim, inst, probs);
    softmax_in_place(probs);
    probs[inst.label] -= 1.0;
    for (c, &r) in probs.iter().enumerate() {
        let coef = scale * r;
        if coef == 0.0 {
            continue;
        }
        let row = &mut out[c * dim..(c + 1) * dim];
        for (j, x) in inst.features.iter() {
            row[j] += coef * x;
        }
    }
}

/// Class probabilities `softmax(W x)`.
pub fn predict_proba(model: &Model, inst: &LabeledInstance) -> Vec<f64> {
    let mut scores = vec![0.0; model.classes()];
    scores_into(model.weights.as_slice(), model.dim(), inst, &mut scores);
    softmax_in_place(&mut scores);
    scores
}

/// `phi_i(W)`: cross-entropy of the softmax plus `(lambda/2) ||W||_F^2`.
pub fn example_loss(model: &Model, inst: &LabeledInstance) -> f64 {
    data_loss(model.weights.as_slice(), model.classes(), model.dim(), inst) + model.regularizer()
}

/// `grad phi_i(W)`: row `c` is `(p_c - [c = y]) x + lambda W_c`.
pub fn example_gradient(model: &Model, inst: &LabeledInstance) -> GradientMatrix {
    let mut g = model.weights.clone();
    g.data.iter_mut().for_each(|v| *v *= model.lambda);
    let mut probs = Vec::new();
    add_data_gradient(
        model.weights.as_slice(),
        model.classes(),
        model.dim(),
        inst,
        1.0,
        &mut g.data,
        &mut probs,
    );
    g
}

/// `P(W)`, the mean of `example_loss` over the dataset.
pub fn full_objective(model: &Model, dataset: &Dataset) -> f64 {
    LogisticObjective::new(dataset, model.lambda).value(model.weights.as_slice())
}

/// `grad P(W)`.
pub fn full_gradient(model: &Model, dataset: &Dataset) -> GradientMatrix {
    let g = LogisticObjective::new(dataset, model.lambda).gradient(model.weights.as_slice());
    Matrix::from_vec(model.classes(), model.dim(), g)
}

/// Index of the largest score; ties go to the lowest class id.
pub fn predict(model: &Model, inst: &LabeledInstance) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    let d = model.dim();
    for c in 0..model.classes() {
        let s = inst.features.dot(model.weights.row(c));
        if s > best.1 {
            best = (c, s);
        }
    }
    debug_assert!(d == 0 || best.1.is_finite());
    best.0
}

/// Fraction of misclassified instances.
pub fn test_error(model: &Model, dataset: &Dataset) -> f64 {
    let wrong = dataset
        .instances()
        .iter()
        .filter(|inst| predict(model, inst) != inst.label)
        .count();
    wrong as f64 / dataset.len() as f64
}

/// Logistic regression as an [`Objective`]; parameters are `W` flattened row-major.
#[derive(Debug, Clone, Copy)]
pub struct LogisticObjective<'a> {
    dataset: &'a Dataset,
    lambda: f64,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(dataset: &'a Dataset, lambda: f64) -> Self {
        Self { dataset, lambda }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn classes(&self) -> usize {
        self.dataset.num_classes()
    }

    fn dim(&self) -> usize {
        self.dataset.dim()
    }
}

impl Objective for LogisticObjective<'_> {
    fn num_examples(&self) -> usize {
        self.dataset.len()
    }

    fn num_params(&self) -> usize {
        self.classes() * self.dim()
    }

    fn example_value(&self, w: &[f64], i: usize) -> f64 {
        data_loss(w, self.classes(), self.dim(), self.dataset.instance(i)) + 0.5 * self.lambda * norm_sq(w)
    }

    fn add_example_gradient(&self, w: &[f64], i: usize, scale: f64, out: &mut [f64]) {
        let mut probs = Vec::new();
        add_data_gradient(w, self.classes(), self.dim(), self.dataset.instance(i), scale, out, &mut probs);
        let reg = scale * self.lambda;
        for (o, wj) in out.iter_mut().zip(w) {
            *o += reg * wj;
        }
    }

    fn value(&self, w: &[f64]) -> f64 {
        let (m, d) = (self.classes(), self.dim());
        let data: f64 = self
            .dataset
            .instances()
            .iter()
            .map(|inst| data_loss(w, m, d, inst))
            .sum();
        data / self.dataset.len() as f64 + 0.5 * self.lambda * norm_sq(w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let n = self.dataset.len() as f64;
        let mut out = vec![0.0; w.len()];
        let mut probs = Vec::new();
        for inst in self.dataset.instances() {
            add_data_gradient(w, self.classes(), self.dim(), inst, 1.0, &mut out, &mut probs);
        }
        for (o, wj) in out.iter_mut().zip(w) {
            *o = *o / n + self.lambda * wj;
        }
        out
    }

    fn add_batch_gradient(&self, w: &[f64], draws: &[(usize, f64)], out: &mut [f64]) {
        let mut probs = Vec::new();
        let mut total = 0.0;
        for &(s, c) in draws {
            add_data_gradient(w, self.classes(), self.dim(), self.dataset.instance(s), c, out, &mut probs);
            total += c;
        }
        let reg = total * self.lambda;
        for (o, wj) in out.iter_mut().zip(w) {
            *o += reg * wj;
        }
    }
}

/// `phi_i(w) = (H/2) ||w - z_i||^2`. `P` is `H`-strongly convex and
/// `H`-smooth, so `gamma = 1/H`, and its minimizer is the anchor mean.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    anchors: Vec<Vec<f64>>,
    strength: f64,
    center: Vec<f64>,
    /// `mean ||z_i - center||^2`
    spread: f64,
}

impl QuadraticProblem {
    pub fn new(anchors: Vec<Vec<f64>>, strength: f64) -> Self {
        assert!(!anchors.is_empty(), "need at least one anchor");
        assert!(strength > 0.0 && strength.is_finite(), "H must be positive");
        let d = anchors[0].len();
        assert!(anchors.iter().all(|z| z.len() == d), "anchors differ in dimension");
        let n = anchors.len() as f64;
        let mut center = vec![0.0; d];
        for z in &anchors {
            for (c, v) in center.iter_mut().zip(z) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= n);
        let spread = anchors.iter().map(|z| sq_dist(z, &center)).sum::<f64>() / n;
        Self {
            anchors,
            strength,
            center,
            spread,
        }
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    /// `H`.
    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Smoothness parameter `gamma = 1/H`.
    pub fn gamma(&self) -> f64 {
        1.0 / self.strength
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `w* = mean(z_i)`.
    pub fn optimum(&self) -> &[f64] {
        &self.center
    }

    pub fn optimal_value(&self) -> f64 {
        0.5 * self.strength * self.spread
    }

    /// `P(w) - P(w*) = (H/2) ||w - w*||^2`.
    pub fn suboptimality(&self, w: &[f64]) -> f64 {
        0.5 * self.strength * sq_dist(w, &self.center)
    }

    /// `sum_(s, c) c * H (w - z_s)` over weighted draws.
    pub fn quadratic_gradient(&self, w: &[f64], draws: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.add_batch_gradient(w, draws, &mut out);
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Objective for QuadraticProblem {
    fn num_examples(&self) -> usize {
        self.anchors.len()
    }

    fn num_params(&self) -> usize {
        self.center.len()
    }

    fn example_value(&self, w: &[f64], i: usize) -> f64 {
        0.5 * self.strength * sq_dist(w, &self.anchors[i])
    }

    fn add_example_gradient(&self, w: &[f64], i: usize, scale: f64, out: &mut [f64]) {
        let c = scale * self.strength;
        for ((o, wj), zj) in out.iter_mut().zip(w).zip(&self.anchors[i]) {
            *o += c * (wj - zj);
        }
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.optimal_value() + self.suboptimality(w)
    }

    /// `H (w - mean z)`.
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.center)
            .map(|(wj, cj)| self.strength * (wj - cj))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_libsvm_str, FeatureVector};

    fn inst(dense: &[f64], label: usize) -> LabeledInstance {
        LabeledInstance {
            features: FeatureVector::from_dense(dense),
            label,
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = Model::zeros(4, 3, 0.5);
        let x = inst(&[1.0, -2.0, 0.5], 2);
        assert!((example_loss(&model, &x) - 4f64.ln()).abs() < 1e-15);
        let g = example_gradient(&model, &x);
        for c in 0..4 {
            let r = 0.25 - if c == 2 { 1.0 } else { 0.0 };
            for (j, xj) in [1.0, -2.0, 0.5].iter().enumerate() {
                assert!((g.get(c, j) - r * xj).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_class_closed_form() {
        // scores (s_y, s_other) = (3, 1)
        let model = Model {
            weights: Matrix::from_vec(2, 1, vec![1.0, 3.0]),
            lambda: 0.0,
        };
        let x = inst(&[1.0], 1);
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((example_loss(&model, &x) - want).abs() < 1e-15);
    }

    #[test]
    fn huge_scores_do_not_overflow() {
        let model = Model {
            weights: Matrix::from_vec(2, 1, vec![1000.0, 0.0]),
            lambda: 0.0,
        };
        let loss = example_loss(&model, &inst(&[1.0], 0));
        assert!(loss.is_finite() && loss.abs() < 1e-300);
        let loss = example_loss(&model, &inst(&[1.0], 1));
        assert!((loss - 1000.0).abs() < 1e-9);
        assert!(example_gradient(&model, &inst(&[1.0], 1)).is_finite());
    }

    #[test]
    fn zero_input_gradient_is_regularizer() {
        let model = Model {
            weights: Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]),
            lambda: 0.1,
        };
        let g = example_gradient(&model, &inst(&[0.0, 0.0], 0));
        let want: Vec<f64> = model.weights.as_slice().iter().map(|w| 0.1 * w).collect();
        assert_eq!(g.as_slice(), want.as_slice());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut s = vec![3.0, -700.0, 12.5, 0.0, 709.0];
        softmax_in_place(&mut s);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_objective_cases() {
        let ds = parse_libsvm_str("1 1:1 2:2\n2 1:-1\n3 2:0.5\n").unwrap();
        let zero = Model::zeros(3, 2, 0.1);
        assert!((full_objective(&zero, &ds) - 3f64.ln()).abs() < 1e-15);

        let one = parse_libsvm_str("1 1:0.3 2:-1\n2 1:1\n").unwrap();
        let model = Model {
            weights: Matrix::from_vec(2, 2, vec![0.2, -0.4, 1.5, 0.7]),
            lambda: 0.3,
        };
        // hand evaluation: scores for x1 = (0.3, -1): (0.46, -0.25); x2 = (1, 0): (0.2, 1.5)
        let reg = 0.5 * 0.3 * (0.04 + 0.16 + 2.25 + 0.49);
        let l1 = (0.46f64.exp() + (-0.25f64).exp()).ln() - 0.46;
        let l2 = (0.2f64.exp() + 1.5f64.exp()).ln() - 1.5;
        let want = (l1 + l2) / 2.0 + reg;
        assert!((full_objective(&model, &one) - want).abs() < 1e-14);
    }

    #[test]
    fn single_instance_matches_example_functions() {
        let ds = parse_libsvm_str("2 1:0.5 3:-1.5\n1 2:1\n").unwrap();
        let one = Dataset::from_labeled(vec![(ds.instance(0).features.clone(), 7)], 3).unwrap();
        let model = Model {
            weights: Matrix::from_vec(1, 3, vec![0.3, -0.2, 0.9]),
            lambda: 0.01,
        };
        let x = one.instance(0);
        assert_eq!(full_objective(&model, &one), example_loss(&model, x));
        let a = full_gradient(&model, &one);
        let b = example_gradient(&model, x);
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }

    #[test]
    fn test_error_tie_rule_and_separator() {
        let ds = parse_libsvm_str("1 1:1\n2 1:-1\n2 2:1\n3 2:2\n").unwrap();
        let zero = Model::zeros(3, 2, 0.0);
        assert_eq!(test_error(&zero, &ds), 0.75);
        // class 0 likes +x1, class 1 likes -x1, class 2 likes x2
        let sep = Model {
            weights: Matrix::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.5]),
            lambda: 0.0,
        };
        let ds = parse_libsvm_str("1 1:1\n2 1:-1\n3 2:2\n").unwrap();
        assert_eq!(test_error(&sep, &ds), 0.0);
    }

    #[test]
    fn quadratic_basics() {
        let q = QuadraticProblem::new(vec![vec![1.0, 2.0], vec![3.0, -2.0]], 2.0);
        assert_eq!(q.optimum(), &[2.0, 0.0]);
        assert_eq!(q.gradient(&[2.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(q.gamma(), 0.5);
        let one = QuadraticProblem::new(vec![vec![1.0, -1.0]], 3.0);
        assert_eq!(one.gradient(&[2.0, 1.0]), vec![3.0, 6.0]);
        assert_eq!(one.quadratic_gradient(&[2.0, 1.0], &[(0, 1.0)]), vec![3.0, 6.0]);
        let g = q.quadratic_gradient(&[0.0, 0.0], &[(0, 0.25), (1, 0.75)]);
        assert_eq!(g, vec![2.0 * (-0.25 - 2.25), 2.0 * (-0.5 + 1.5)]);
        let generic: f64 = (0..2).map(|i| q.example_value(&[0.5, 0.5], i)).sum::<f64>() / 2.0;
        assert!((q.value(&[0.5, 0.5]) - generic).abs() < 1e-14);
    }
}
