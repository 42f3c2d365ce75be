//! Reference execution engine.
//!
//! Every operation is implemented as a direct loop (no im2col, no FFT) so
//! the results are easy to audit; all reductions accumulate in `f64` —
//! also for `f32` tensors — and round exactly once when the accumulator is
//! written back. Within one output element the accumulation order is fixed
//! (input channel, then kernel row, then kernel column), which makes every
//! operation bit-reproducible.
//!
//! Convolution follows the cross-correlation convention (kernels are not
//! flipped): `out[j, y, x] = bias[j] + sum_{i,u,v} in[i, y*s - p + u, x*s -
//! p + v] * k[j, i, u, v]` with zero padding outside the input.

use crate::container::WeightsStore;
use crate::ir::{ActivationMode, LayerKind, LayerNode, NetworkSpec};
use crate::{Error, Result, Scalar, Tensor};

/// Convolution parameters: a `(c_out, c_in, k, k)` kernel and an optional
/// `(c_out,)` bias, both borrowed from a weights store.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
}

/// Inference-mode batch-normalisation parameters (one entry per channel).
///
/// The normaliser is `gamma * (x - mean) / sqrt(var + epsilon) + beta`.
/// `var + epsilon` is summed in the tensor's own precision before widening;
/// this keeps the identity construction (`var = 1 - epsilon`) exact in
/// every dtype. Everything after that runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Number of channels; the constructor-by-hand path should keep all
    /// four tensors at the same length, which [`batchnorm_infer`] checks.
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// PReLU parameter: the negative-side slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationParams {
    pub slope: f64,
}

fn tensor_err(message: impl Into<String>) -> Error {
    Error::Tensor(message.into())
}

fn expect_rank3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(tensor_err(format!(
            "{what} must have shape (c, h, w), got {other:?}"
        ))),
    }
}

fn expect_kernel<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [cj, ci, kh, kw] if kh == kw => Ok((*cj, *ci, *kh)),
        other => Err(tensor_err(format!(
            "{what} must have shape (c_out, c_in, k, k), got {other:?}"
        ))),
    }
}

/// Copy a `(c, h, w)` tensor into an `f64` buffer with a zero border of
/// `padding` pixels on every spatial side.
fn pad_to_f64<T: Scalar>(input: &Tensor<T>, c: usize, h: usize, w: usize, padding: usize) -> Vec<f64> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    let mut padded = vec![0.0f64; c * ph * pw];
    let data = input.data();
    for ci in 0..c {
        for y in 0..h {
            let src = (ci * h + y) * w;
            let dst = (ci * ph + y + padding) * pw + padding;
            for x in 0..w {
                padded[dst + x] = data[src + x].into_f64();
            }
        }
    }
    padded
}

/// 2-D convolution (cross-correlation) with symmetric zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    params: ConvParams<'_, T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(tensor_err("stride must be positive"));
    }
    let (c_in, h, w) = expect_rank3(input, "conv2d input")?;
    let (c_out, kc_in, k) = expect_kernel(params.kernel, "conv2d kernel")?;
    if kc_in != c_in {
        return Err(tensor_err(format!(
            "kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if let Some(bias) = params.bias {
        if bias.shape() != [c_out] {
            return Err(tensor_err(format!(
                "bias must have shape ({c_out},), got {:?}",
                bias.shape()
            )));
        }
    }
    let oh = crate::ir::conv_output_dim(h, k, stride, padding, "<conv2d>")?;
    let ow = crate::ir::conv_output_dim(w, k, stride, padding, "<conv2d>")?;

    let padded = pad_to_f64(input, c_in, h, w, padding);
    let pw = w + 2 * padding;
    let ph = h + 2 * padding;
    let kernel: Vec<f64> = params.kernel.data().iter().map(|&v| v.into_f64()).collect();

    let mut acc = vec![0.0f64; c_out * oh * ow];
    for cj in 0..c_out {
        let out_base = cj * oh * ow;
        if let Some(bias) = params.bias {
            let b = bias.data()[cj].into_f64();
            acc[out_base..out_base + oh * ow].fill(b);
        }
        for ci in 0..c_in {
            let k_base = (cj * c_in + ci) * k * k;
            for u in 0..k {
                for v in 0..k {
                    let weight = kernel[k_base + u * k + v];
                    for y in 0..oh {
                        let in_row = (ci * ph + y * stride + u) * pw + v;
                        let out_row = out_base + y * ow;
                        for x in 0..ow {
                            acc[out_row + x] += weight * padded[in_row + x * stride];
                        }
                    }
                }
            }
        }
    }

    Tensor::new(
        vec![c_out, oh, ow],
        acc.into_iter().map(T::from_f64).collect(),
    )
}

/// Max pooling with a square window and no padding.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    if kernel == 0 || stride == 0 {
        return Err(tensor_err("pooling kernel and stride must be positive"));
    }
    let (c, h, w) = expect_rank3(input, "maxpool2d input")?;
    if h < kernel || w < kernel {
        return Err(tensor_err(format!(
            "pooling window {kernel} does not fit in ({h}, {w})"
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let data = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = data[(ci * h + y * stride) * w + x * stride];
                for u in 0..kernel {
                    let row = (ci * h + y * stride + u) * w + x * stride;
                    for v in 0..kernel {
                        let cand = data[row + v];
                        if cand > best {
                            best = cand;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Inference-mode batch normalisation over a `(c, h, w)` tensor.
pub fn batchnorm_infer<T: Scalar>(input: &Tensor<T>, params: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_rank3(input, "batchnorm input")?;
    for (tensor, what) in [
        (&params.gamma, "gamma"),
        (&params.beta, "beta"),
        (&params.mean, "mean"),
        (&params.var, "var"),
    ] {
        if tensor.shape() != [c] {
            return Err(tensor_err(format!(
                "batchnorm {what} must have shape ({c},), got {:?}",
                tensor.shape()
            )));
        }
    }
    if !(params.epsilon > 0.0 && params.epsilon.is_finite()) {
        return Err(tensor_err(format!(
            "batchnorm epsilon must be positive and finite, got {}",
            params.epsilon
        )));
    }

    let eps = T::from_f64(params.epsilon);
    let mut out = Vec::with_capacity(c * h * w);
    let data = input.data();
    for ci in 0..c {
        // `var + eps` in T precision (see the type-level comment), the rest
        // in f64.
        let denom = (params.var.data()[ci] + eps).into_f64();
        if denom <= 0.0 {
            return Err(tensor_err(format!(
                "batchnorm channel {ci}: var + epsilon = {denom} is not positive"
            )));
        }
        let scale = params.gamma.data()[ci].into_f64() / denom.sqrt();
        let mean = params.mean.data()[ci].into_f64();
        let beta = params.beta.data()[ci].into_f64();
        for &v in &data[ci * h * w..(ci + 1) * h * w] {
            out.push(T::from_f64((v.into_f64() - mean) * scale + beta));
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Elementwise nonlinearity. `params` must be present for PReLU and is
/// ignored for ReLU.
pub fn activation<T: Scalar>(
    input: &Tensor<T>,
    mode: ActivationMode,
    params: Option<&ActivationParams>,
) -> Result<Tensor<T>> {
    let zero = T::zero();
    let data = match mode {
        ActivationMode::Relu => input
            .data()
            .iter()
            .map(|&v| if v < zero { zero } else { v })
            .collect(),
        ActivationMode::Prelu => {
            let slope = params
                .ok_or_else(|| tensor_err("prelu needs a slope parameter"))?
                .slope;
            input
                .data()
                .iter()
                .map(|&v| {
                    if v < zero {
                        T::from_f64(slope * v.into_f64())
                    } else {
                        v
                    }
                })
                .collect()
        }
    };
    Tensor::new(input.shape().to_vec(), data)
}

/// Mean over both spatial axes: `(c, h, w)` -> `(c,)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_rank3(input, "global_avg_pool input")?;
    let n = (h * w) as f64;
    let data = input.data();
    let out = (0..c)
        .map(|ci| {
            let sum: f64 = data[ci * h * w..(ci + 1) * h * w]
                .iter()
                .map(|&v| v.into_f64())
                .sum();
            T::from_f64(sum / n)
        })
        .collect();
    Tensor::new(vec![c], out)
}

/// Fully connected layer: `weight (out, in) @ input (in,) + bias (out,)`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n_in = match input.shape() {
        [n] => *n,
        other => {
            return Err(tensor_err(format!(
                "linear input must be rank-1, got {other:?}"
            )))
        }
    };
    let (n_out, w_in) = match weight.shape() {
        [o, i] => (*o, *i),
        other => {
            return Err(tensor_err(format!(
                "linear weight must be rank-2, got {other:?}"
            )))
        }
    };
    if w_in != n_in {
        return Err(tensor_err(format!(
            "linear weight expects {w_in} inputs, got {n_in}"
        )));
    }
    if bias.shape() != [n_out] {
        return Err(tensor_err(format!(
            "linear bias must have shape ({n_out},), got {:?}",
            bias.shape()
        )));
    }
    let x = input.data();
    let out = (0..n_out)
        .map(|o| {
            let mut acc = bias.data()[o].into_f64();
            let row = &weight.data()[o * n_in..(o + 1) * n_in];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv.into_f64() * xv.into_f64();
            }
            T::from_f64(acc)
        })
        .collect();
    Tensor::new(vec![n_out], out)
}

/// Compose two stacked convolution kernels into the single kernel their
/// sequential application (both at stride 1, no padding) is equal to.
///
/// `first` has shape `(c_mid, c_in, k1, k1)` and is applied to the input;
/// `second` has shape `(c_out, c_mid, k2, k2)` and is applied to `first`'s
/// output. The result has shape `(c_out, c_in, k1 + k2 - 1, k1 + k2 - 1)`:
///
/// ```text
/// out[j, i, wy, wx] = sum_{m} sum_{uy+vy=wy, ux+vx=wx}
///                     first[m, i, uy, ux] * second[j, m, vy, vx]
/// ```
pub fn compose_kernels<T: Scalar>(first: &Tensor<T>, second: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_mid, c_in, k1) = expect_kernel(first, "first kernel")?;
    let (c_out, sc_mid, k2) = expect_kernel(second, "second kernel")?;
    if sc_mid != c_mid {
        return Err(tensor_err(format!(
            "kernels do not chain: first produces {c_mid} channels, second expects {sc_mid}"
        )));
    }
    let ke = k1 + k2 - 1;
    let f: Vec<f64> = first.data().iter().map(|&v| v.into_f64()).collect();
    let s: Vec<f64> = second.data().iter().map(|&v| v.into_f64()).collect();
    let mut acc = vec![0.0f64; c_out * c_in * ke * ke];
    for cj in 0..c_out {
        for ci in 0..c_in {
            let out_base = (cj * c_in + ci) * ke * ke;
            for cm in 0..c_mid {
                let f_base = (cm * c_in + ci) * k1 * k1;
                let s_base = (cj * c_mid + cm) * k2 * k2;
                for uy in 0..k1 {
                    for ux in 0..k1 {
                        let fv = f[f_base + uy * k1 + ux];
                        for vy in 0..k2 {
                            let out_row = out_base + (uy + vy) * ke + ux;
                            let s_row = s_base + vy * k2;
                            for vx in 0..k2 {
                                acc[out_row + vx] += fv * s[s_row + vx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(
        vec![c_out, c_in, ke, ke],
        acc.into_iter().map(T::from_f64).collect(),
    )
}

fn fetch_batchnorm<T: Scalar>(
    store: &WeightsStore<T>,
    name: &str,
    channels: usize,
    epsilon: f64,
) -> Result<BatchNormParams<T>> {
    Ok(BatchNormParams {
        gamma: store.get_checked(&format!("{name}.gamma"), &[channels])?.clone(),
        beta: store.get_checked(&format!("{name}.beta"), &[channels])?.clone(),
        mean: store.get_checked(&format!("{name}.mean"), &[channels])?.clone(),
        var: store.get_checked(&format!("{name}.var"), &[channels])?.clone(),
        epsilon,
    })
}

/// Apply one layer (recursing into residual blocks).
fn apply_layer<T: Scalar>(
    layer: &LayerNode,
    input: &Tensor<T>,
    store: &WeightsStore<T>,
) -> Result<Tensor<T>> {
    match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            has_bias,
        } => {
            let kernel = store.get_checked(
                &format!("{}.weight", layer.name),
                &[*out_channels, *in_channels, *kernel_size, *kernel_size],
            )?;
            let bias = if *has_bias {
                Some(store.get_checked(&format!("{}.bias", layer.name), &[*out_channels])?)
            } else {
                None
            };
            conv2d(input, ConvParams { kernel, bias }, *stride, *padding)
        }
        LayerKind::BatchNorm2d { channels, epsilon } => {
            let params = fetch_batchnorm(store, &layer.name, *channels, *epsilon)?;
            batchnorm_infer(input, &params)
        }
        LayerKind::Activation { mode } => {
            let params = match mode {
                ActivationMode::Prelu => {
                    let slope = store.get_checked(&format!("{}.slope", layer.name), &[1])?;
                    Some(ActivationParams {
                        slope: slope.data()[0].into_f64(),
                    })
                }
                ActivationMode::Relu => None,
            };
            activation(input, *mode, params.as_ref())
        }
        LayerKind::MaxPool2d {
            kernel_size,
            stride,
        } => maxpool2d(input, *kernel_size, *stride),
        LayerKind::GlobalAvgPool => global_avg_pool(input),
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let weight = store.get_checked(
                &format!("{}.weight", layer.name),
                &[*out_features, *in_features],
            )?;
            let bias = store.get_checked(&format!("{}.bias", layer.name), &[*out_features])?;
            linear(input, weight, bias)
        }
        LayerKind::ResidualBlock { main, shortcut } => {
            let mut main_out = input.clone();
            for sub in main {
                main_out = apply_layer(sub, &main_out, store)?;
            }
            let mut short_out = input.clone();
            for sub in shortcut {
                short_out = apply_layer(sub, &short_out, store)?;
            }
            if main_out.shape() != short_out.shape() {
                return Err(Error::Shape {
                    layer: layer.name.clone(),
                    message: format!(
                        "residual branches disagree: main {:?} vs shortcut {:?}",
                        main_out.shape(),
                        short_out.shape()
                    ),
                });
            }
            // Elementwise add in f64, then the block's ReLU.
            let summed = Tensor::new(
                main_out.shape().to_vec(),
                main_out
                    .data()
                    .iter()
                    .zip(short_out.data())
                    .map(|(&a, &b)| T::from_f64(a.into_f64() + b.into_f64()))
                    .collect(),
            )?;
            activation(&summed, ActivationMode::Relu, None)
        }
    }
}

/// Run the network end to end.
///
/// The input must match the declared input channel count; an empty layer
/// list returns the input unchanged. Parameters are resolved in `store` by
/// the [`LayerNode::param_refs`] naming convention; a missing or mis-shaped
/// parameter fails with an error naming it.
pub fn forward<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    forward_prefix(net, store, input, net.layers.len())
}

/// Run the network up to and including the named top-level layer and
/// return that activation.
pub fn forward_at<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    input: &Tensor<T>,
    upto_layer: &str,
) -> Result<Tensor<T>> {
    let end = net
        .position(upto_layer)
        .ok_or_else(|| Error::UnknownLayer(upto_layer.to_string()))?;
    forward_prefix(net, store, input, end + 1)
}

fn forward_prefix<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    input: &Tensor<T>,
    n_layers: usize,
) -> Result<Tensor<T>> {
    let (c, _, _) = expect_rank3(input, "network input")?;
    if c != net.input_shape[0] {
        return Err(tensor_err(format!(
            "input has {} channels but the network declares {}",
            c, net.input_shape[0]
        )));
    }
    let mut x = input.clone();
    for layer in &net.layers[..n_layers] {
        x = apply_layer(layer, &x, store)?;
    }
    Ok(x)
}
