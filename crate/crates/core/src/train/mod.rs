//! Head-only training on cached backbone features.

mod features;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::head::Head;
use crate::ops::{axpy, dot, log_softmax};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Matrix;

pub use features::{extract_features, ExtractReport, FeatureCache, FeatureItem, FEATURE_CACHE_KIND};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training samples")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sample {sample} has label {label}, outside 0..{classes}")]
    Label { sample: usize, label: usize, classes: usize },
    #[error("{features} feature rows for {labels} labels")]
    Rows { features: usize, labels: usize },
    #[error("head expects {expected} features, got {actual}")]
    Width { expected: usize, actual: usize },
    #[error("loss became {loss} at epoch {epoch}, batch {batch} (largest |weight| {max_weight})")]
    NonFinite { epoch: usize, batch: usize, loss: f64, max_weight: f64 },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub head_lr: f64,
    /// Kept for the record; the backbone is frozen here.
    pub backbone_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Stop after this many epochs in a row that improve the best epoch loss
    /// by less than `min_improvement`. Zero disables early stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            head_lr: 1e-3,
            backbone_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 30,
            patience: 5,
            min_improvement: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.head_lr > 0.0 && self.backbone_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    epsilon: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            epsilon: T::of(epsilon),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

/// Gradient of the mean cross-entropy with respect to the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

fn check(head_width: usize, features: &Matrix<impl Scalar>, labels: &[usize], classes: usize) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(TrainError::Rows {
            features: features.rows(),
            labels: labels.len(),
        });
    }
    if features.cols() != head_width {
        return Err(TrainError::Width {
            expected: head_width,
            actual: features.cols(),
        });
    }
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(TrainError::Label { sample, label, classes });
    }
    Ok(())
}

fn logits_row<T: Scalar>(head: &Head<T>, x: &[T], out: &mut [T]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(x, head.weights.row(j)) + head.bias[j];
    }
}

/// Mean cross-entropy `-log p(label)` over `rows`.
pub fn cross_entropy<T: Scalar>(head: &Head<T>, features: &Matrix<T>, labels: &[usize], rows: &[usize]) -> T {
    let mut z = vec![T::zero(); head.num_classes()];
    let mut total = T::zero();
    for &i in rows {
        logits_row(head, features.row(i), &mut z);
        let lp = log_softmax(&z).expect("at least one class");
        total -= lp[labels[i]];
    }
    total / T::of(rows.len() as f64)
}

/// Mean loss over `rows` and its analytic gradient: for each sample,
/// `(softmax - onehot)` times the feature vector.
pub fn loss_and_gradient<T: Scalar>(
    head: &Head<T>,
    features: &Matrix<T>,
    labels: &[usize],
    rows: &[usize],
) -> Result<(T, HeadGradient<T>)> {
    check(head.in_features(), features, labels, head.num_classes())?;
    if rows.is_empty() {
        return Err(TrainError::Empty);
    }
    let c = head.num_classes();
    let mut gw = Matrix::zeros(c, head.in_features());
    let mut gb = vec![T::zero(); c];
    let mut z = vec![T::zero(); c];
    let mut total = T::zero();
    for &i in rows {
        let x = features.row(i);
        logits_row(head, x, &mut z);
        let lp = log_softmax(&z).expect("at least one class");
        total -= lp[labels[i]];
        for j in 0..c {
            let mut d = lp[j].exp();
            if j == labels[i] {
                d -= T::one();
            }
            gb[j] += d;
            axpy(d, x, gw.row_mut(j));
        }
    }
    let scale = T::one() / T::of(rows.len() as f64);
    gw.data_mut().iter_mut().for_each(|v| *v *= scale);
    gb.iter_mut().for_each(|v| *v *= scale);
    Ok((total * scale, HeadGradient { weights: gw, bias: gb }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub head: Head<T>,
    /// Mean training loss of each epoch, accumulated while it ran.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Trains a freshly initialized head.
pub fn train_head<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let head = Head::init(num_classes, features.cols(), seed::derive(config.seed, &["head"]));
    train_head_from(head, features, labels, config)
}

/// Mini-batch Adam on the mean cross-entropy, reshuffling every epoch with
/// a permutation drawn from (seed, epoch). The last partial batch is kept.
pub fn train_head_from<T: Scalar>(
    mut head: Head<T>,
    features: &Matrix<T>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if labels.is_empty() {
        return Err(TrainError::Empty);
    }
    check(head.in_features(), features, labels, head.num_classes())?;
    let n = labels.len();
    let lr = T::of(config.head_lr);
    let mut adam_w = Adam::new(head.weights.data().len(), config.beta1, config.beta2, config.adam_epsilon);
    let mut adam_b = Adam::new(head.bias.len(), config.beta1, config.beta2, config.adam_epsilon);
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(config.seed, &["epoch", &epoch.to_string()]));
        let mut sum = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let (loss, g) = loss_and_gradient(&head, features, labels, rows)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                let max_weight = head.weights.data().iter().map(|w| w.as_f64().abs()).fold(0.0, f64::max);
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    loss,
                    max_weight,
                });
            }
            sum += loss * rows.len() as f64;
            adam_w.step(head.weights.data_mut(), g.weights.data(), lr);
            adam_b.step(&mut head.bias, &g.bias, lr);
        }
        let epoch_loss = sum / n as f64;
        losses.push(epoch_loss);
        if best - epoch_loss < config.min_improvement {
            stale += 1;
        } else {
            stale = 0;
        }
        best = best.min(epoch_loss);
        if config.patience > 0 && stale >= config.patience {
            return Ok(TrainOutcome {
                head,
                epoch_losses: losses,
                stopped_early: true,
            });
        }
    }
    Ok(TrainOutcome {
        head,
        epoch_losses: losses,
        stopped_early: false,
    })
}

/// Fraction of rows whose highest logit is the true label (ties to the lower
/// class index).
pub fn accuracy<T: Scalar>(head: &Head<T>, features: &Matrix<T>, labels: &[usize]) -> f64 {
    let mut z = vec![T::zero(); head.num_classes()];
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        logits_row(head, features.row(i), &mut z);
        let mut best = 0;
        for j in 1..z.len() {
            if z[j] > z[best] {
                best = j;
            }
        }
        hits += usize::from(best == l);
    }
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::<f64>::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            adam.step(&mut p, &[0.0; 3], 1e-3);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.5], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8 && (p[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            head_lr: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(train_head(&f, &[0, 5], 3, &TrainConfig::default()), Err(TrainError::Label { sample: 1, .. })));
        assert!(matches!(train_head(&Matrix::<f32>::zeros(0, 3), &[], 3, &TrainConfig::default()), Err(TrainError::Empty)));
        assert!(matches!(train_head(&f, &[0], 3, &TrainConfig::default()), Err(TrainError::Rows { .. })));
    }

    #[test]
    fn overflowing_features_abort() {
        let f = Matrix::from_vec(2, 1, vec![f32::MAX, -f32::MAX]).unwrap();
        let head = Head {
            weights: Matrix::from_vec(2, 1, vec![10.0, -10.0]).unwrap(),
            bias: vec![0.0; 2],
        };
        let err = train_head_from(head, &f, &[1, 0], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { epoch: 0, batch: 0, .. }), "{err}");
    }
}
