//! Food photo recognition: a MobileNet-v2 classifier with a replaceable head,
//! plus the dataset tooling around it (class consolidation, stratified
//! splits, targeted augmentation, head training, top-k evaluation).
//!
//! Numeric kernels and the training code are generic over [`Scalar`]
//! (`f32`, `f64`); the model and its weight files are `f32`.

pub mod augment;
pub mod container;
pub mod dataset;
pub mod head;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use head::Head;
pub use model::{Model, ModelSpec, Prediction};
pub use scalar::Scalar;
pub use tensor::{Matrix, Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Head32 = Head<f32>;
pub type Head64 = Head<f64>;
pub type Conv2dParams32 = ops::Conv2dParams<f32>;
pub type BatchNormParams32 = ops::BatchNormParams<f32>;
/// Exact accuracy fractions.
pub type Accuracy = num_rational::Ratio<u64>;
