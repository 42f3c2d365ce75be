//! Built-in model templates and seeded weight initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::WeightsStore;
use crate::ir::{ActivationMode, LayerKind, LayerNode, NetworkSpec};
use crate::{Error, Result, Scalar, Tensor};

/// Default batch-normalisation epsilon used by the templates and by the
/// identity layers the rewrites insert.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Available starting-point architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// An 18-layer residual classifier: 7x7/2 stem convolution, 3x3/2 max
    /// pool, four two-block residual stages (64/128/256/512 channels),
    /// global average pooling and a linear head. Declared input
    /// `(3, 224, 224)`.
    Resnet18Like,
    /// Three plain convolutions for fast tests (first one 7x7/2 with a
    /// bias, so the stem is splittable the same way as the large model).
    /// Declared input `(3, 64, 64)`; the last convolution emits one channel
    /// per class.
    TinyConv,
}

impl Template {
    pub fn as_str(self) -> &'static str {
        match self {
            Template::Resnet18Like => "resnet18-like",
            Template::TinyConv => "tiny-conv",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "resnet18-like" => Ok(Template::Resnet18Like),
            "tiny-conv" => Ok(Template::TinyConv),
            other => Err(Error::Rewrite(format!(
                "unknown template `{other}` (expected `resnet18-like` or `tiny-conv`)"
            ))),
        }
    }
}

fn conv(name: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize, bias: bool) -> LayerNode {
    LayerNode::new(
        name,
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride: s,
            padding: p,
            has_bias: bias,
        },
    )
}

fn bn(name: &str, channels: usize) -> LayerNode {
    LayerNode::new(
        name,
        LayerKind::BatchNorm2d {
            channels,
            epsilon: DEFAULT_EPSILON,
        },
    )
}

fn relu(name: &str) -> LayerNode {
    LayerNode::new(
        name,
        LayerKind::Activation {
            mode: ActivationMode::Relu,
        },
    )
}

fn residual_block(name: &str, cin: usize, cout: usize, stride: usize) -> LayerNode {
    let main = vec![
        conv(&format!("{name}_conv1"), cin, cout, 3, stride, 1, false),
        bn(&format!("{name}_bn1"), cout),
        relu(&format!("{name}_relu1")),
        conv(&format!("{name}_conv2"), cout, cout, 3, 1, 1, false),
        bn(&format!("{name}_bn2"), cout),
    ];
    let shortcut = if cin == cout && stride == 1 {
        Vec::new()
    } else {
        vec![
            conv(&format!("{name}_down_conv"), cin, cout, 1, stride, 0, false),
            bn(&format!("{name}_down_bn"), cout),
        ]
    };
    LayerNode::new(name, LayerKind::ResidualBlock { main, shortcut })
}

/// Build a template architecture with the given number of output classes.
pub fn build(template: Template, classes: usize) -> Result<NetworkSpec> {
    if classes == 0 {
        return Err(Error::Rewrite("classes must be positive".to_string()));
    }
    match template {
        Template::Resnet18Like => {
            let mut layers = vec![
                conv("conv1", 3, 64, 7, 2, 3, false),
                bn("bn1", 64),
                relu("relu1"),
                LayerNode::new(
                    "maxpool",
                    LayerKind::MaxPool2d {
                        kernel_size: 3,
                        stride: 2,
                    },
                ),
            ];
            let stages: [(usize, usize, &str); 4] = [
                (64, 64, "layer1"),
                (64, 128, "layer2"),
                (128, 256, "layer3"),
                (256, 512, "layer4"),
            ];
            for (i, (cin, cout, stage)) in stages.into_iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                layers.push(residual_block(&format!("{stage}_0"), cin, cout, stride));
                layers.push(residual_block(&format!("{stage}_1"), cout, cout, 1));
            }
            layers.push(LayerNode::new("gap", LayerKind::GlobalAvgPool));
            layers.push(LayerNode::new(
                "fc",
                LayerKind::Linear {
                    in_features: 512,
                    out_features: classes,
                },
            ));
            NetworkSpec::new([3, 224, 224], layers)
        }
        Template::TinyConv => {
            let layers = vec![
                conv("conv1", 3, 24, 7, 2, 3, true),
                relu("relu1"),
                conv("conv2", 24, 8, 3, 1, 1, true),
                relu("relu2"),
                conv("conv3", 8, classes, 3, 1, 1, true),
            ];
            NetworkSpec::new([3, 64, 64], layers)
        }
    }
}

fn gaussian<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0f64, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

fn init_one<T: Scalar>(
    layer: &LayerNode,
    zero_out: bool,
    store: &mut WeightsStore<T>,
    rng: &mut ChaCha8Rng,
) {
    match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            has_bias,
            ..
        } => {
            let fan_in = (in_channels * kernel_size * kernel_size) as f64;
            let shape = vec![*out_channels, *in_channels, *kernel_size, *kernel_size];
            store.insert(
                format!("{}.weight", layer.name),
                gaussian(shape, (2.0 / fan_in).sqrt(), rng),
            );
            if *has_bias {
                store.insert(
                    format!("{}.bias", layer.name),
                    Tensor::zeros(vec![*out_channels]),
                );
            }
        }
        LayerKind::BatchNorm2d { channels, .. } => {
            let c = *channels;
            store.insert(format!("{}.gamma", layer.name), Tensor::full(vec![c], T::one()));
            store.insert(format!("{}.beta", layer.name), Tensor::zeros(vec![c]));
            store.insert(format!("{}.mean", layer.name), Tensor::zeros(vec![c]));
            store.insert(format!("{}.var", layer.name), Tensor::full(vec![c], T::one()));
        }
        LayerKind::Activation { mode } => {
            if *mode == ActivationMode::Prelu {
                store.insert(
                    format!("{}.slope", layer.name),
                    Tensor::full(vec![1], T::from_f64(0.25)),
                );
            }
        }
        LayerKind::MaxPool2d { .. } | LayerKind::GlobalAvgPool => {}
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            if zero_out {
                store.insert(
                    format!("{}.weight", layer.name),
                    Tensor::zeros(vec![*out_features, *in_features]),
                );
            } else {
                let std = (2.0 / *in_features as f64).sqrt();
                store.insert(
                    format!("{}.weight", layer.name),
                    gaussian(vec![*out_features, *in_features], std, rng),
                );
            }
            store.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![*out_features]));
        }
        // Blocks carry no parameters themselves; their sub-layers are
        // visited individually.
        LayerKind::ResidualBlock { .. } => {}
    }
}

/// Initialise every parameter the network references.
///
/// Convolution and linear weights draw from a zero-mean Gaussian with
/// variance `2 / fan_in` (fan-in scaled); biases start at zero; batch
/// normalisation starts at the identity statistics `gamma = 1, beta = 0,
/// mean = 0, var = 1`; PReLU slopes start at `0.25`. The last top-level
/// linear layer — the classifier head, when there is one — is
/// zero-initialised entirely.
///
/// Deterministic: one seeded stream, consumed in document order (residual
/// blocks: main path first, then shortcut).
pub fn init_weights<T: Scalar>(net: &NetworkSpec, seed: u64) -> Result<WeightsStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightsStore::new();

    let final_linear = net
        .layers
        .iter()
        .rev()
        .find(|l| matches!(l.kind, LayerKind::Linear { .. }))
        .map(|l| l.name.clone());

    let mut nodes = Vec::new();
    for layer in &net.layers {
        layer.visit(&mut |n| nodes.push(n));
    }
    for node in nodes {
        let zero_out = Some(&node.name) == final_linear.as_ref();
        init_one(node, zero_out, &mut store, &mut rng);
    }
    Ok(store)
}
