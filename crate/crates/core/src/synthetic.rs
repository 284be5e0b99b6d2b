//! Seeded synthetic problems: Gaussian-mixture classification data and
//! random quadratics.

use crate::data::{Dataset, DataError};
use crate::objective::QuadraticProblem;
use crate::sampling::RngState;

/// Shape of a Gaussian-mixture classification problem.
///
/// Each class owns `blobs_per_class` centers drawn uniformly from the unit
/// cube. A point picks its class uniformly, then one of that class's blobs,
/// then adds isotropic noise with standard deviation `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub train: usize,
    pub test: usize,
    pub dim: usize,
    pub classes: usize,
    pub blobs_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl MixtureSpec {
    /// Same size, dimension and class count as the pendigits benchmark.
    pub fn pendigits_like(seed: u64) -> Self {
        Self {
            train: 7494,
            test: 3498,
            dim: 16,
            classes: 10,
            blobs_per_class: 4,
            noise: 0.08,
            seed,
        }
    }

    /// Train and test sets with labels `1..=classes`. Every class appears in
    /// the training set.
    pub fn generate(&self) -> Result<(Dataset, Dataset), DataError> {
        if self.classes == 0 || self.blobs_per_class == 0 || self.dim == 0 || self.train < self.classes {
            return Err(DataError::Invalid {
                index: 0,
                reason: "mixture needs classes, blobs and dimension ≥ 1 and train ≥ classes".into(),
            });
        }
        let mut rng = RngState::from_seed(self.seed);
        let centers: Vec<Vec<Vec<f64>>> = (0..self.classes)
            .map(|_| {
                (0..self.blobs_per_class)
                    .map(|_| (0..self.dim).map(|_| rng.unit()).collect())
                    .collect()
            })
            .collect();
        let sample = |count: usize, rng: &mut RngState, cover: bool| {
            let mut rows = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                let c = if cover && i < self.classes { i } else { rng.below(self.classes) };
                let blob = &centers[c][rng.below(self.blobs_per_class)];
                rows.push(blob.iter().map(|m| m + self.noise * rng.normal()).collect::<Vec<f64>>());
                labels.push(c as i64 + 1);
            }
            (rows, labels)
        };
        let (tr_rows, tr_labels) = sample(self.train, &mut rng, true);
        let (te_rows, te_labels) = sample(self.test, &mut rng, false);
        let train = Dataset::from_dense(&tr_rows, &tr_labels)?;
        let test = Dataset::from_dense(&te_rows, &te_labels)?;
        crate::data::align(train, test)
    }
}

/// `n` anchors `z_i = offset + N(0, I_d)` with strength `h`.
pub fn random_quadratic(n: usize, d: usize, h: f64, offset: f64, seed: u64) -> QuadraticProblem {
    let mut rng = RngState::from_seed(seed);
    let anchors = (0..n)
        .map(|_| (0..d).map(|_| offset + rng.normal()).collect())
        .collect();
    QuadraticProblem::new(anchors, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shape_and_determinism() {
        let spec = MixtureSpec {
            train: 50,
            test: 20,
            dim: 3,
            classes: 4,
            blobs_per_class: 2,
            noise: 0.1,
            seed: 5,
        };
        let (train, test) = spec.generate().unwrap();
        assert_eq!((train.len(), test.len(), train.dim(), train.num_classes()), (50, 20, 3, 4));
        assert_eq!(train.original_labels(), &[1, 2, 3, 4]);
        assert_eq!(spec.generate().unwrap().0, train);
    }

    #[test]
    fn quadratic_is_reproducible() {
        assert_eq!(random_quadratic(5, 2, 1.0, 3.0, 1), random_quadratic(5, 2, 1.0, 3.0, 1));
    }
}
