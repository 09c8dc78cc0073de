//! MobileNet-v2 classifier: construction, head replacement, folded inference.
//!
//! Parameters are stored flat, one buffer per [`ParamSlot`] of
//! [`ModelSpec::param_layout`], which is also the on-disk order. Batch norm is
//! folded into the convolutions when a model is constructed, so inference runs
//! conv → ReLU6 chains only. The unfolded path is kept for verification.

mod preprocess;
pub mod reference;
mod spec;
mod weights;

use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::container::ContainerError;
use crate::head::Head;
use crate::ops::{
    add, add_assign, batch_norm, conv2d, fold_batchnorm, global_avg_pool, relu6_in_place, softmax, BatchNormParams,
    Conv2dParams,
};
use crate::tensor::{Matrix, Tensor, TensorError};

pub use preprocess::{decode_image, preprocess, IMAGENET_MEAN, IMAGENET_STD};
pub use spec::{
    BlockLayout, BottleneckSpec, FreezePolicy, ModelSpec, ParamCounts, ParamKind, ParamSlot, Stage,
    MOBILENET_V2_BOTTLENECKS,
};
pub use weights::{WeightManifest, WeightMetadata, MODEL_KIND};

pub const DEFAULT_BN_EPSILON: f32 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec{}: {reason}", block.map(|b| format!(" at bottleneck row {b}")).unwrap_or_default())]
    InvalidSpec { block: Option<usize>, reason: String },
    #[error("cannot freeze {frozen} stages, the backbone has {stages}")]
    InvalidFreeze { frozen: usize, stages: usize },
    #[error("a classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{labels} labels supplied for {classes} classes")]
    LabelCount { labels: usize, classes: usize },
    #[error("input shape {actual} does not match the expected {expected}")]
    InputShape { expected: String, actual: String },
    #[error("k = {k} is outside 1..={num_classes}")]
    InvalidK { k: usize, num_classes: usize },
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("weight file: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("could not decode image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Geometry of one convolution in the network.
#[derive(Debug, Clone, Copy)]
struct ConvDef {
    slot: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    relu6: bool,
}

#[derive(Debug, Clone)]
struct StageDef {
    convs: Vec<ConvDef>,
    residual: bool,
}

fn stage_defs(spec: &ModelSpec) -> Vec<StageDef> {
    let mut slot = 0;
    let mut next = |stride, padding, groups, relu6| {
        let d = ConvDef {
            slot,
            stride,
            padding,
            groups,
            relu6,
        };
        slot += 5;
        d
    };
    let mut stages = vec![StageDef {
        convs: vec![next(2, 1, 1, true)],
        residual: false,
    }];
    for b in spec.blocks() {
        let mut convs = Vec::with_capacity(3);
        if b.expansion != 1 {
            convs.push(next(1, 0, 1, true));
        }
        convs.push(next(b.stride, 1, b.hidden, true));
        convs.push(next(1, 0, 1, false));
        stages.push(StageDef {
            convs,
            residual: b.residual,
        });
    }
    stages.push(StageDef {
        convs: vec![next(1, 0, 1, true)],
        residual: false,
    });
    stages
}

#[derive(Debug, Clone)]
struct FoldedConv {
    conv: Conv2dParams<f32>,
    relu6: bool,
}

#[derive(Debug, Clone)]
struct FoldedStage {
    convs: Vec<FoldedConv>,
    residual: bool,
}

/// A convolution as stored, with its batch norm, next to the folded form used
/// for inference.
#[derive(Debug, Clone)]
pub struct LayerPair {
    pub name: String,
    pub conv: Conv2dParams<f32>,
    pub bn: BatchNormParams<f32>,
    pub folded: Conv2dParams<f32>,
    pub relu6: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub index: usize,
    pub label: String,
    pub probability: f32,
}

/// Top-k classes for one image, highest probability first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub ranked: Vec<ClassScore>,
    pub latency_ms: f64,
}

impl Prediction {
    pub fn top1(&self) -> &ClassScore {
        &self.ranked[0]
    }
}

/// Class indices ordered by descending probability; ties go to the lower index.
pub fn rank_classes(probabilities: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probabilities.len()).collect();
    idx.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    labels: Vec<String>,
    bn_epsilon: f32,
    params: Vec<Vec<f32>>,
    stages: Vec<FoldedStage>,
    head: Head<f32>,
}

/// `class_00`, `class_01`, ...
pub fn placeholder_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i:02}")).collect()
}

impl Model {
    /// Builds a model with seeded random weights: He-uniform convolutions,
    /// batch-norm statistics jittered around identity, and a head drawn as in
    /// [`Head::init`].
    pub fn build(spec: ModelSpec, labels: Vec<String>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for slot in spec.param_layout() {
            let n = slot.elements();
            let values: Vec<f32> = if slot.name.starts_with("classifier") {
                Vec::new()
            } else if slot.name.ends_with("conv.weight") {
                let fan_in: usize = slot.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                let (lo, hi) = match slot.name.rsplit('.').next() {
                    Some("weight" | "running_var") => (0.8, 1.2),
                    _ => (-0.1, 0.1),
                };
                (0..n).map(|_| rng.random_range(lo..hi)).collect()
            };
            params.push(values);
        }
        let head = Head::init(spec.num_classes, spec.head_width, rng.random());
        let k = params.len();
        params[k - 2] = head.weights.data().to_vec();
        params[k - 1] = head.bias.clone();
        Self::from_params(spec, labels, DEFAULT_BN_EPSILON, params)
    }

    /// Assembles a model from raw parameter buffers in layout order.
    pub fn from_params(spec: ModelSpec, labels: Vec<String>, bn_epsilon: f32, params: Vec<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        if labels.len() != spec.num_classes {
            return Err(ModelError::LabelCount {
                labels: labels.len(),
                classes: spec.num_classes,
            });
        }
        if !(bn_epsilon >= 0.0) {
            return Err(ModelError::Metadata(format!("batch-norm epsilon {bn_epsilon} is negative")));
        }
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(ModelError::Metadata(format!(
                "{} parameter buffers for {} slots",
                params.len(),
                layout.len()
            )));
        }
        for (slot, p) in layout.iter().zip(&params) {
            if p.len() != slot.elements() {
                return Err(ModelError::Metadata(format!(
                    "`{}` holds {} values, shape {:?} needs {}",
                    slot.name,
                    p.len(),
                    slot.shape,
                    slot.elements()
                )));
            }
        }
        let k = params.len();
        let head = Head {
            weights: Matrix::from_vec(spec.num_classes, spec.head_width, params[k - 2].clone())?,
            bias: params[k - 1].clone(),
        };
        let mut model = Self {
            spec,
            labels,
            bn_epsilon,
            params,
            stages: Vec::new(),
            head,
        };
        model.stages = model.fold()?;
        Ok(model)
    }

    fn conv_bn(&self, d: &ConvDef) -> Result<(Conv2dParams<f32>, BatchNormParams<f32>)> {
        let layout = self.spec.param_layout();
        let slot = &layout[d.slot];
        let s = &slot.shape;
        let weights = Tensor::from_vec([s[0], s[1], s[2], s[3]], self.params[d.slot].clone())?;
        let conv = Conv2dParams::new(weights, None, (d.stride, d.stride), (d.padding, d.padding), d.groups)?;
        let p = |i: usize| self.params[d.slot + i].clone();
        let bn = BatchNormParams::new(p(1), p(2), p(3), p(4), self.bn_epsilon)?;
        Ok((conv, bn))
    }

    fn fold(&self) -> Result<Vec<FoldedStage>> {
        stage_defs(&self.spec)
            .iter()
            .map(|st| {
                let convs = st
                    .convs
                    .iter()
                    .map(|d| {
                        let (conv, bn) = self.conv_bn(d)?;
                        Ok(FoldedConv {
                            conv: fold_batchnorm(&conv, &bn)?,
                            relu6: d.relu6,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FoldedStage {
                    convs,
                    residual: st.residual,
                })
            })
            .collect()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn bn_epsilon(&self) -> f32 {
        self.bn_epsilon
    }

    pub fn head(&self) -> &Head<f32> {
        &self.head
    }

    /// Raw parameter buffers in layout order.
    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub fn parameter_counts(&self, policy: FreezePolicy) -> Result<ParamCounts> {
        self.spec.parameter_counts(policy)
    }

    /// Every convolution with its batch norm and folded counterpart, in
    /// execution order.
    pub fn layers(&self) -> Result<Vec<LayerPair>> {
        let layout = self.spec.param_layout();
        let mut out = Vec::new();
        for (st, folded) in stage_defs(&self.spec).iter().zip(&self.stages) {
            for (d, f) in st.convs.iter().zip(&folded.convs) {
                let (conv, bn) = self.conv_bn(d)?;
                out.push(LayerPair {
                    name: layout[d.slot].name.trim_end_matches(".conv.weight").to_string(),
                    conv,
                    bn,
                    folded: f.conv.clone(),
                    relu6: d.relu6,
                });
            }
        }
        Ok(out)
    }

    /// SHA-256 over every backbone parameter, excluding the classifier.
    pub fn backbone_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params[..self.params.len() - 2] {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// New model with a freshly initialized head over `labels`; backbone
    /// parameters are copied bit for bit.
    pub fn replace_head(&self, labels: Vec<String>, seed: u64) -> Result<Self> {
        if labels.len() < 2 {
            return Err(ModelError::TooFewClasses(labels.len()));
        }
        let head = Head::init(labels.len(), self.spec.head_width, seed);
        self.with_head(head, labels)
    }

    /// New model using the given classifier head.
    pub fn with_head(&self, head: Head<f32>, labels: Vec<String>) -> Result<Self> {
        if head.in_features() != self.spec.head_width {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "with_head",
                expected: format!("head over {} features", self.spec.head_width),
                actual: format!("head over {} features", head.in_features()),
            }));
        }
        if labels.len() != head.num_classes() {
            return Err(ModelError::LabelCount {
                labels: labels.len(),
                classes: head.num_classes(),
            });
        }
        let mut spec = self.spec.clone();
        spec.num_classes = head.num_classes();
        let mut params = self.params.clone();
        let k = params.len();
        params[k - 2] = head.weights.data().to_vec();
        params[k - 1] = head.bias.clone();
        Ok(Self {
            spec,
            labels,
            bn_epsilon: self.bn_epsilon,
            params,
            stages: self.stages.clone(),
            head,
        })
    }

    fn check_input(&self, batch: &Tensor<f32>) -> Result<()> {
        let s = batch.shape();
        let r = self.spec.input_resolution;
        if s.c != 3 || s.h != r || s.w != r {
            return Err(ModelError::InputShape {
                expected: format!("(N, 3, {r}, {r})"),
                actual: s.to_string(),
            });
        }
        Ok(())
    }

    /// Backbone activations after the final 1x1 conv, before pooling.
    pub fn backbone(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(batch)?;
        let mut x: Option<Tensor<f32>> = None;
        for stage in &self.stages {
            let input = x.as_ref().unwrap_or(batch);
            let mut y: Option<Tensor<f32>> = None;
            for c in &stage.convs {
                let mut out = conv2d(y.as_ref().unwrap_or(input), &c.conv)?;
                if c.relu6 {
                    relu6_in_place(&mut out);
                }
                y = Some(out);
            }
            let mut y = y.expect("every stage has a convolution");
            if stage.residual {
                add_assign(&mut y, input)?;
            }
            x = Some(y);
        }
        Ok(x.expect("at least one stage"))
    }

    /// Pooled penultimate features, one row of `head_width` values per image.
    pub fn features(&self, batch: &Tensor<f32>) -> Result<Matrix<f32>> {
        let x = self.backbone(batch)?;
        pooled(&x)
    }

    pub fn logits(&self, batch: &Tensor<f32>) -> Result<Matrix<f32>> {
        Ok(self.head.logits(&self.features(batch)?)?)
    }

    /// Full softmax distribution per image.
    pub fn probabilities(&self, batch: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let logits = self.logits(batch)?;
        Ok(logits.iter_rows().map(softmax).collect::<Result<_, _>>()?)
    }

    /// Reference path that applies batch norm explicitly after every conv.
    pub fn logits_unfolded(&self, batch: &Tensor<f32>) -> Result<Matrix<f32>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for st in stage_defs(&self.spec) {
            let mut y = x.clone();
            for d in &st.convs {
                let (conv, bn) = self.conv_bn(d)?;
                y = batch_norm(&conv2d(&y, &conv)?, &bn)?;
                if d.relu6 {
                    relu6_in_place(&mut y);
                }
            }
            x = if st.residual { add(&y, &x)? } else { y };
        }
        Ok(self.head.logits(&pooled(&x)?)?)
    }

    /// Top-k predictions for every image in the batch.
    pub fn forward(&self, batch: &Tensor<f32>, k: usize) -> Result<Vec<Prediction>> {
        let n_classes = self.num_classes();
        if k == 0 || k > n_classes {
            return Err(ModelError::InvalidK { k, num_classes: n_classes });
        }
        let start = Instant::now();
        let probs = self.probabilities(batch)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(probs
            .iter()
            .map(|p| Prediction {
                ranked: rank_classes(p)
                    .into_iter()
                    .take(k)
                    .map(|i| ClassScore {
                        index: i,
                        label: self.labels[i].clone(),
                        probability: p[i],
                    })
                    .collect(),
                latency_ms,
            })
            .collect())
    }

    /// Preprocesses and classifies one decoded image. Latency covers
    /// preprocessing and the forward pass.
    pub fn classify_image(&self, image: &RgbImage, k: usize) -> Result<Prediction> {
        let start = Instant::now();
        let x = preprocess(image, self.spec.input_resolution)?;
        let mut p = self.forward(&x, k)?.remove(0);
        p.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(p)
    }

    /// Decodes JPEG/PNG bytes and classifies them. Latency includes decoding.
    pub fn classify_bytes(&self, bytes: &[u8], k: usize) -> Result<Prediction> {
        let start = Instant::now();
        let img = decode_image(bytes)?;
        let mut p = self.classify_image(&img, k)?;
        p.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(p)
    }
}

fn pooled(x: &Tensor<f32>) -> Result<Matrix<f32>> {
    let s = x.shape();
    let pooled = global_avg_pool(x)?;
    Ok(Matrix::from_vec(s.n, s.c, pooled.into_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(num_classes: usize) -> ModelSpec {
        ModelSpec {
            stem_channels: 4,
            bottlenecks: vec![BottleneckSpec::new(1, 4, 1, 1), BottleneckSpec::new(2, 6, 2, 2)],
            head_width: 8,
            input_resolution: 16,
            num_classes,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(tiny_spec(3), placeholder_labels(3), 1).unwrap();
        let b = Model::build(tiny_spec(3), placeholder_labels(3), 1).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn replace_head_keeps_backbone() {
        let m = Model::build(tiny_spec(3), placeholder_labels(3), 1).unwrap();
        let r = m.replace_head(placeholder_labels(5), 9).unwrap();
        assert_eq!(r.backbone_digest(), m.backbone_digest());
        assert_eq!(r.num_classes(), 5);
        assert_eq!(r.head(), m.replace_head(placeholder_labels(5), 9).unwrap().head());
        assert!(matches!(m.replace_head(placeholder_labels(1), 0), Err(ModelError::TooFewClasses(1))));
    }

    #[test]
    fn forward_rejects_wrong_resolution_and_k() {
        let m = Model::build(tiny_spec(3), placeholder_labels(3), 1).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 17, 16]);
        assert!(matches!(m.forward(&x, 1), Err(ModelError::InputShape { .. })));
        let x = Tensor::<f32>::zeros([1, 3, 16, 16]);
        assert!(matches!(m.forward(&x, 0), Err(ModelError::InvalidK { .. })));
        assert!(matches!(m.forward(&x, 4), Err(ModelError::InvalidK { .. })));
        assert_eq!(m.forward(&x, 3).unwrap()[0].ranked.len(), 3);
    }

    #[test]
    fn zero_batch_forward() {
        let m = Model::build(tiny_spec(3), placeholder_labels(3), 1).unwrap();
        let x = Tensor::<f32>::zeros([0, 3, 16, 16]);
        assert!(m.forward(&x, 2).unwrap().is_empty());
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_classes(&[0.2, 0.4, 0.2, 0.2]), vec![1, 0, 2, 3]);
    }
}
