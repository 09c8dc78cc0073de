//! Inference kernels: grouped convolution, batch norm and its folding into a
//! preceding convolution, ReLU6, global average pooling, fully-connected
//! layers and softmax.
//!
//! Every kernel accumulates in a fixed order, so results are bit-stable for a
//! given input.

use crate::scalar::Scalar;
use crate::tensor::{Matrix, Result, Shape, Tensor, TensorError};

/// Convolution weights and geometry. Weights are shaped
/// `(out_channels, in_channels / groups, kernel_h, kernel_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    weights: Tensor<T>,
    bias: Option<Vec<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(
        weights: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let ws = weights.shape();
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("stride must be at least 1, got {stride:?}"),
            });
        }
        if groups == 0 || ws.n % groups != 0 {
            return Err(TensorError::InvalidGroups {
                op: "conv2d",
                groups,
                in_channels: ws.c * groups.max(1),
                out_channels: ws.n,
            });
        }
        if let Some(b) = &bias {
            if b.len() != ws.n {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: format!("bias of length {}", ws.n),
                    actual: format!("bias of length {}", b.len()),
                });
            }
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s.h, s.w)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    /// Output shape for an input shape, validating channel agreement.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!(
                    "input with {} channels for weights {}",
                    self.in_channels(),
                    self.weights.shape()
                ),
                actual: format!("input {input}"),
            });
        }
        let (kh, kw) = self.kernel();
        let (ph, pw) = self.padding;
        if input.h + 2 * ph < kh || input.w + 2 * pw < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("padded input at least {kh}x{kw}"),
                actual: format!("input {input} with padding {:?}", self.padding),
            });
        }
        Ok(Shape::new(
            input.n,
            self.out_channels(),
            (input.h + 2 * ph - kh) / self.stride.0 + 1,
            (input.w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }
}

/// Inference-mode batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        epsilon: T,
    ) -> Result<Self> {
        let c = gamma.len();
        for (name, v) in [("beta", &beta), ("running_mean", &running_mean), ("running_var", &running_var)] {
            if v.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    expected: format!("{name} of length {c}"),
                    actual: format!("length {}", v.len()),
                });
            }
        }
        if running_var.iter().any(|v| !(*v >= T::zero())) || !(epsilon >= T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                reason: "running_var and epsilon must be non-negative".into(),
            });
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        })
    }

    /// Identity normalization over `c` channels.
    pub fn identity(c: usize, epsilon: T) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one() - epsilon; c],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn scale(&self, c: usize) -> T {
        self.gamma[c] / (self.running_var[c] + self.epsilon).sqrt()
    }
}

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let in_shape = input.shape();
    if params.in_channels() % params.groups != 0 || in_shape.c % params.groups != 0 {
        return Err(TensorError::InvalidGroups {
            op: "conv2d",
            groups: params.groups,
            in_channels: in_shape.c,
            out_channels: params.out_channels(),
        });
    }
    let out_shape = params.output_shape(in_shape)?;
    let mut out = Tensor::zeros(out_shape);
    if out_shape.is_empty() {
        return Ok(out);
    }
    let in_item = in_shape.item();
    let out_item = out_shape.item();
    for n in 0..in_shape.n {
        let src = &input.data()[n * in_item..(n + 1) * in_item];
        let dst = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        conv_item(src, in_shape, dst, out_shape, params);
    }
    Ok(out)
}

/// Convolution where every channel is filtered independently
/// (`groups == in_channels == out_channels`).
pub fn depthwise_conv2d<T: Scalar>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    if !params.is_depthwise() {
        return Err(TensorError::InvalidGroups {
            op: "depthwise_conv2d",
            groups: params.groups,
            in_channels: params.in_channels(),
            out_channels: params.out_channels(),
        });
    }
    conv2d(input, params)
}

fn conv_item<T: Scalar>(src: &[T], in_shape: Shape, dst: &mut [T], out_shape: Shape, p: &Conv2dParams<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2; see `pointwise`.
        unsafe { conv_item_avx2(src, in_shape, dst, out_shape, p) };
        return;
    }
    conv_item_kernel(src, in_shape, dst, out_shape, p);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_item_avx2<T: Scalar>(src: &[T], in_shape: Shape, dst: &mut [T], out_shape: Shape, p: &Conv2dParams<T>) {
    conv_item_kernel(src, in_shape, dst, out_shape, p);
}

#[inline(always)]
fn conv_item_kernel<T: Scalar>(src: &[T], in_shape: Shape, dst: &mut [T], out_shape: Shape, p: &Conv2dParams<T>) {
    let (kh_n, kw_n) = p.kernel();
    let out_plane = out_shape.plane();
    let in_plane = in_shape.plane();
    let cin_g = p.weights.shape().c;
    let cout_g = p.out_channels() / p.groups;
    let w = p.weights.data();

    for (co, plane) in dst.chunks_exact_mut(out_plane).enumerate() {
        plane.fill(p.bias.as_ref().map_or(T::zero(), |b| b[co]));
    }

    if (kh_n, kw_n) == (1, 1) && p.stride == (1, 1) && p.padding == (0, 0) {
        pointwise_kernel(src, in_plane, dst, p, cin_g, cout_g);
        return;
    }

    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (h, wd) = (in_shape.h, in_shape.w);
    let (ho, wo) = (out_shape.h, out_shape.w);
    // one gathered (Ho, Wo) plane per kernel tap, shared by every output
    // channel of the group
    let mut tap = vec![T::zero(); out_plane];
    for g in 0..p.groups {
        for ci_local in 0..cin_g {
            let ci = g * cin_g + ci_local;
            let xin = &src[ci * in_plane..(ci + 1) * in_plane];
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    gather_tap(xin, (h, wd), &mut tap, (ho, wo), (kh, kw), (sh, sw), (ph, pw));
                    for co in g * cout_g..(g + 1) * cout_g {
                        let wv = w[((co * cin_g + ci_local) * kh_n + kh) * kw_n + kw];
                        let plane = &mut dst[co * out_plane..(co + 1) * out_plane];
                        for (o, &x) in plane.iter_mut().zip(&tap) {
                            *o += wv * x;
                        }
                    }
                }
            }
        }
    }
}

/// Fills `tap[oh, ow]` with `x[oh*sh + kh - ph, ow*sw + kw - pw]`, zero
/// outside the image.
fn gather_tap<T: Scalar>(
    x: &[T],
    (h, w): (usize, usize),
    tap: &mut [T],
    (ho, wo): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let ow_lo = if kw >= pw { 0 } else { (pw - kw).div_ceil(sw) };
    let ow_hi = if w + pw > kw { ((w - 1 + pw - kw) / sw + 1).min(wo) } else { 0 };
    for oh in 0..ho {
        let row_out = &mut tap[oh * wo..(oh + 1) * wo];
        let ih = oh * sh + kh;
        if ih < ph || ih - ph >= h || ow_lo >= ow_hi {
            row_out.fill(T::zero());
            continue;
        }
        let row_in = &x[(ih - ph) * w..(ih - ph + 1) * w];
        row_out[..ow_lo].fill(T::zero());
        row_out[ow_hi..].fill(T::zero());
        let first = ow_lo * sw + kw - pw;
        let dst = &mut row_out[ow_lo..ow_hi];
        if sw == 1 {
            dst.copy_from_slice(&row_in[first..first + dst.len()]);
        } else {
            for (i, o) in dst.iter_mut().enumerate() {
                *o = row_in[first + i * sw];
            }
        }
    }
}

const TILE_CO: usize = 4;
const TILE_PX: usize = 16;

/// 1x1 stride-1 unpadded convolution as a packed, register-tiled matrix
/// product. Each output element still accumulates bias first, then input
/// channels in ascending order, matching the general path.
#[inline(always)]
fn pointwise_kernel<T: Scalar>(src: &[T], plane: usize, dst: &mut [T], p: &Conv2dParams<T>, cin_g: usize, cout_g: usize) {
    let w = p.weights.data();
    let full = plane - plane % TILE_PX;
    let mut packed = vec![[T::zero(); TILE_PX]; cin_g];
    for g in 0..p.groups {
        let x = &src[g * cin_g * plane..(g + 1) * cin_g * plane];
        let co_start = g * cout_g;
        // weights of four output channels interleaved per input channel
        let quads: Vec<Vec<[T; TILE_CO]>> = (0..cout_g / TILE_CO)
            .map(|b| {
                let co = co_start + b * TILE_CO;
                (0..cin_g)
                    .map(|ci| std::array::from_fn(|r| w[(co + r) * cin_g + ci]))
                    .collect()
            })
            .collect();
        let tail = co_start + quads.len() * TILE_CO..co_start + cout_g;

        for px in (0..full).step_by(TILE_PX) {
            for (ci, row) in packed.iter_mut().enumerate() {
                row.copy_from_slice(&x[ci * plane + px..ci * plane + px + TILE_PX]);
            }
            for (b, wq) in quads.iter().enumerate() {
                let co = co_start + b * TILE_CO;
                let load = |r: usize| -> [T; TILE_PX] {
                    let o = (co + r) * plane + px;
                    dst[o..o + TILE_PX].try_into().expect("tile")
                };
                let (mut a0, mut a1, mut a2, mut a3) = (load(0), load(1), load(2), load(3));
                for (xs, wv) in packed.iter().zip(wq) {
                    for j in 0..TILE_PX {
                        a0[j] += wv[0] * xs[j];
                        a1[j] += wv[1] * xs[j];
                        a2[j] += wv[2] * xs[j];
                        a3[j] += wv[3] * xs[j];
                    }
                }
                for (r, a) in [a0, a1, a2, a3].iter().enumerate() {
                    let o = (co + r) * plane + px;
                    dst[o..o + TILE_PX].copy_from_slice(a);
                }
            }
            for co in tail.clone() {
                let o = co * plane + px;
                let mut a: [T; TILE_PX] = dst[o..o + TILE_PX].try_into().expect("tile");
                for (ci, xs) in packed.iter().enumerate() {
                    let wv = w[co * cin_g + ci];
                    for j in 0..TILE_PX {
                        a[j] += wv * xs[j];
                    }
                }
                dst[o..o + TILE_PX].copy_from_slice(&a);
            }
        }
        for co in co_start..co_start + cout_g {
            for q in full..plane {
                let mut acc = dst[co * plane + q];
                for ci in 0..cin_g {
                    acc += w[co * cin_g + ci] * x[ci * plane + q];
                }
                dst[co * plane + q] = acc;
            }
        }
    }
}

/// Inference-mode batch normalization.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if bn.channels() != s.c {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            expected: format!("input with {} channels", bn.channels()),
            actual: format!("input {s}"),
        });
    }
    let mut out = input.clone();
    let plane = s.plane();
    if plane == 0 {
        return Ok(out);
    }
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % s.c;
        let denom = (bn.running_var[c] + bn.epsilon).sqrt();
        for v in chunk {
            *v = bn.gamma[c] * (*v - bn.running_mean[c]) / denom + bn.beta[c];
        }
    }
    Ok(out)
}

/// Absorbs inference-mode batch norm into the preceding convolution.
pub fn fold_batchnorm<T: Scalar>(conv: &Conv2dParams<T>, bn: &BatchNormParams<T>) -> Result<Conv2dParams<T>> {
    let cout = conv.out_channels();
    if bn.channels() != cout {
        return Err(TensorError::ShapeMismatch {
            op: "fold_batchnorm",
            expected: format!("batch norm over {cout} channels"),
            actual: format!("{} channels", bn.channels()),
        });
    }
    if let Some(c) = (0..cout).find(|&c| bn.running_var[c] + bn.epsilon <= T::zero()) {
        return Err(TensorError::InvalidArgument {
            op: "fold_batchnorm",
            reason: format!("channel {c} has zero variance and zero epsilon"),
        });
    }
    let mut weights = conv.weights.clone();
    let per_out = weights.shape().item();
    let mut bias = Vec::with_capacity(cout);
    for c in 0..cout {
        let scale = bn.scale(c);
        if per_out > 0 {
            for v in &mut weights.data_mut()[c * per_out..(c + 1) * per_out] {
                *v *= scale;
            }
        }
        let b = conv.bias.as_ref().map_or(T::zero(), |b| b[c]);
        bias.push((b - bn.running_mean[c]) * scale + bn.beta[c]);
    }
    Conv2dParams::new(weights, Some(bias), conv.stride, conv.padding, conv.groups)
}

pub fn relu6<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    input.map(|v| v.max(T::zero()).min(six))
}

pub fn relu6_in_place<T: Scalar>(t: &mut Tensor<T>) {
    let six = T::of(6.0);
    for v in t.data_mut() {
        *v = v.max(T::zero()).min(six);
    }
}

/// `a += b`, elementwise.
pub fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            expected: a.shape().to_string(),
            actual: b.shape().to_string(),
        });
    }
    for (o, &v) in a.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(())
}

/// Elementwise sum, used by residual connections.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            expected: a.shape().to_string(),
            actual: b.shape().to_string(),
        });
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Mean over each (H, W) plane; output is `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(TensorError::EmptySpatial("global_avg_pool"));
    }
    let count = T::of(s.plane() as f64);
    let data = input
        .data()
        .chunks_exact(s.plane())
        .map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v) / count)
        .collect();
    Tensor::from_vec([s.n, s.c, 1, 1], data)
}

/// `input · weightsᵀ + bias`, with `weights` shaped `(out, in)`.
pub fn fully_connected<T: Scalar>(input: &Matrix<T>, weights: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    if input.cols() != weights.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "fully_connected",
            expected: format!("input with {} columns for weights {}x{}", weights.cols(), weights.rows(), weights.cols()),
            actual: format!("input {}x{}", input.rows(), input.cols()),
        });
    }
    if bias.len() != weights.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "fully_connected",
            expected: format!("bias of length {}", weights.rows()),
            actual: format!("bias of length {}", bias.len()),
        });
    }
    let mut out = Matrix::zeros(input.rows(), weights.rows());
    for i in 0..input.rows() {
        let x = input.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = dot(x, weights.row(j)) + bias[j];
        }
    }
    Ok(out)
}

/// Inner product accumulated in eight interleaved lanes, then summed in a
/// fixed order. Deterministic for a given length.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[l] += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(TensorError::Empty("softmax"));
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(softmax(logits))` without forming the probabilities first.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(TensorError::Empty("log_softmax"));
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = logits.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    Ok(logits.iter().map(|&v| v - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn conv(weights: Tensor<f32>, stride: usize, pad: usize, groups: usize) -> Conv2dParams<f32> {
        Conv2dParams::new(weights, None, (stride, stride), (pad, pad), groups).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(&x, &conv(t([1, 1, 1, 1], &[1.0]), 1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_counting_case() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &conv(Tensor::full([1, 1, 3, 3], 1.0), 1, 0, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn bias_added_per_output_channel() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let p = Conv2dParams::new(Tensor::full([2, 1, 1, 1], 1.0), Some(vec![10.0, -1.0]), (1, 1), (0, 0), 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[11.0, 11.0, 11.0, 11.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_strided_output_extents() {
        let x = Tensor::<f32>::zeros([2, 3, 8, 7]);
        let p = conv(Tensor::zeros([4, 3, 3, 3]), 2, 1, 1);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 4, 4));
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let p = conv(Tensor::zeros([4, 3, 3, 3]), 1, 1, 1);
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("(4, 3, 3, 3)"), "{msg}");
        assert!(msg.contains("(1, 2, 4, 4)"), "{msg}");
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(matches!(
            Conv2dParams::new(Tensor::<f32>::zeros([3, 1, 3, 3]), None, (1, 1), (1, 1), 2),
            Err(TensorError::InvalidGroups { .. })
        ));
        // groups divide Cout but not the input's channel count
        let p = conv(Tensor::zeros([4, 1, 1, 1]), 1, 0, 2);
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(conv2d(&x, &p).is_err());
    }

    #[test]
    fn depthwise_scales_each_channel() {
        let x = t([1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let p = conv(t([2, 1, 1, 1], &[2.0, 3.0]), 1, 0, 2);
        let y = depthwise_conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn depthwise_of_zero_input_is_zero() {
        let x = Tensor::<f32>::zeros([1, 3, 5, 5]);
        let w = Tensor::from_fn([3, 1, 3, 3], |[c, _, h, w]| (c + h * w) as f32 - 2.5);
        let p = Conv2dParams::new(w, Some(vec![0.0; 3]), (1, 1), (1, 1), 3).unwrap();
        let y = depthwise_conv2d(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_rejects_non_depthwise_params() {
        let x = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let p = conv(Tensor::zeros([2, 2, 3, 3]), 1, 1, 1);
        assert!(matches!(depthwise_conv2d(&x, &p), Err(TensorError::InvalidGroups { .. })));
    }

    #[test]
    fn fold_identity_normalization_is_a_no_op() {
        let w = Tensor::from_fn([2, 1, 1, 1], |[c, ..]| c as f32 + 0.5);
        let p = Conv2dParams::new(w.clone(), Some(vec![0.25, -1.0]), (1, 1), (0, 0), 1).unwrap();
        let bn = BatchNormParams::new(vec![1.0; 2], vec![0.0; 2], vec![0.0; 2], vec![1.0; 2], 0.0).unwrap();
        let f = fold_batchnorm(&p, &bn).unwrap();
        assert_eq!(f.weights(), &w);
        assert_eq!(f.bias().unwrap(), &[0.25, -1.0]);
    }

    #[test]
    fn fold_pure_scale_doubles_weights() {
        let w = Tensor::from_fn([2, 3, 1, 1], |[o, i, ..]| (o * 3 + i) as f32);
        let p = Conv2dParams::new(w.clone(), Some(vec![0.0; 2]), (1, 1), (0, 0), 1).unwrap();
        let bn = BatchNormParams::new(vec![2.0; 2], vec![0.0; 2], vec![0.0; 2], vec![1.0; 2], 0.0).unwrap();
        let f = fold_batchnorm(&p, &bn).unwrap();
        assert_eq!(f.weights(), &w.map(|v| v * 2.0));
    }

    #[test]
    fn fold_rejects_length_mismatch() {
        let p = conv(Tensor::zeros([2, 1, 1, 1]), 1, 0, 1);
        let bn = BatchNormParams::<f32>::identity(3, 1e-5);
        assert!(matches!(fold_batchnorm(&p, &bn), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn relu6_clamps() {
        let x = t([1, 1, 1, 5], &[-1.0, 0.0, 3.0, 6.0, 7.0]);
        assert_eq!(relu6(&x).data(), &[0.0, 0.0, 3.0, 6.0, 6.0]);
        let z = Tensor::<f32>::zeros([2, 2, 2, 2]);
        assert_eq!(relu6(&z), z);
    }

    #[test]
    fn global_avg_pool_means() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full([2, 3, 5, 5], 1.75);
        let y = global_avg_pool(&c).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert!(y.data().iter().all(|&v| v == 1.75));
        assert!(matches!(
            global_avg_pool(&Tensor::<f32>::zeros([1, 1, 0, 3])),
            Err(TensorError::EmptySpatial(_))
        ));
    }

    #[test]
    fn fully_connected_identity_and_bias() {
        let x = Matrix::from_rows(&[vec![1.0f32, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let y = fully_connected(&x, &Matrix::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(y, x);
        let y = fully_connected(&x, &Matrix::zeros(2, 3), &[7.0, -2.0]).unwrap();
        assert!(y.iter_rows().all(|r| r == [7.0, -2.0]));
        assert!(fully_connected(&x, &Matrix::zeros(2, 4), &[0.0; 2]).is_err());
        assert!(fully_connected(&x, &Matrix::zeros(2, 3), &[0.0; 3]).is_err());
    }

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax(&[0.0f32, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(softmax::<f32>(&[]), Err(TensorError::Empty(_))));
        let p = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[0] >= 1.0 - 1e-9);
        let p = softmax(&[1000.0f32, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = [0.3f64, -2.0, 5.0, 1.0];
        let p = softmax(&x).unwrap();
        let lp = log_softmax(&x).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_batch_passes_through() {
        let x = Tensor::<f32>::zeros([0, 3, 8, 8]);
        let p = conv(Tensor::zeros([4, 3, 3, 3]), 2, 1, 1);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), Shape::new(0, 4, 4, 4));
        assert_eq!(global_avg_pool(&x).unwrap().shape(), Shape::new(0, 3, 1, 1));
        assert_eq!(relu6(&x).shape(), x.shape());
        let bn = BatchNormParams::<f32>::identity(3, 1e-5);
        assert_eq!(batch_norm(&x, &bn).unwrap().shape(), x.shape());
        let m = Matrix::<f32>::zeros(0, 4);
        assert_eq!(fully_connected(&m, &Matrix::zeros(2, 4), &[0.0; 2]).unwrap().rows(), 0);
    }
}
