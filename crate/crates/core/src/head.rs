//! Fully-connected classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::{fully_connected, softmax};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Result};

/// Linear classifier: `weights` is `(num_classes, in_features)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Head<T> {
    pub fn zeros(num_classes: usize, in_features: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, in_features),
            bias: vec![T::zero(); num_classes],
        }
    }

    /// Weights uniform in ±1/sqrt(in_features), zero bias.
    pub fn init(num_classes: usize, in_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let data = (0..num_classes * in_features)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weights: Matrix::from_vec(num_classes, in_features, data).expect("sized"),
            bias: vec![T::zero(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        fully_connected(features, &self.weights, &self.bias)
    }

    /// Softmax over each row of logits.
    pub fn probabilities(&self, features: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        let logits = self.logits(features)?;
        logits.iter_rows().map(softmax).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
