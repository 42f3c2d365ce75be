//! Plain-data description of a feed-forward convolutional network.
//!
//! A [`NetworkSpec`] is an ordered list of named layers plus a declared
//! input shape and a free-form string metadata map (used, among other
//! things, to record rewrite history). The description carries structure
//! only; parameter values live separately in a
//! [`WeightsStore`](crate::container::WeightsStore) and are resolved by the
//! naming convention implemented in [`LayerNode::param_refs`].

mod flops;
mod rf;
mod schema;
mod shape;

pub use flops::{count_flops, FlopsReport, LayerCost};
pub use rf::{receptive_field, ReceptiveFieldState};
pub use schema::{parse_network, serialize_network};
pub use shape::{conv_output_dim, infer_shapes, output_shape, pool_output_dim};
pub(crate) use shape::fold_layer;

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    /// `max(x, 0)`; carries no parameters.
    Relu,
    /// `x` for `x >= 0`, `a * x` otherwise, with one learned scalar slope
    /// `a` per layer (stored as a shape-`[1]` parameter tensor).
    Prelu,
}

impl ActivationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationMode::Relu => "relu",
            ActivationMode::Prelu => "prelu",
        }
    }
}

/// Layer variants understood by the toolkit.
///
/// Spatial tensors are `(channels, height, width)`; `Linear` consumes the
/// rank-1 tensor produced by `GlobalAvgPool`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// 2-D convolution (cross-correlation; kernels are not flipped) with a
    /// square kernel, symmetric zero padding and a single stride for both
    /// spatial axes.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    /// Inference-mode batch normalisation: per-channel affine transform
    /// built from learned `gamma`/`beta` and running `mean`/`var`.
    BatchNorm2d { channels: usize, epsilon: f64 },
    /// Elementwise nonlinearity.
    Activation { mode: ActivationMode },
    /// Max pooling with a square window and no padding.
    MaxPool2d { kernel_size: usize, stride: usize },
    /// Mean over both spatial axes: `(c, h, w)` -> `(c,)`.
    GlobalAvgPool,
    /// Fully connected layer with bias: `(in,)` -> `(out,)`.
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Two sub-chains joined by elementwise addition followed by a ReLU.
    ///
    /// The canonical residual shape is `conv-bn-act-conv-bn` on the main
    /// path and either an empty shortcut (identity) or `conv-bn` for a
    /// projection; any sub-chains whose output shapes agree are accepted.
    ResidualBlock {
        main: Vec<LayerNode>,
        shortcut: Vec<LayerNode>,
    },
}

impl LayerKind {
    /// Schema tag, also used in error messages.
    pub fn kind_str(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::BatchNorm2d { .. } => "BatchNorm2d",
            LayerKind::Activation { .. } => "Activation",
            LayerKind::MaxPool2d { .. } => "MaxPool2d",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Linear { .. } => "Linear",
            LayerKind::ResidualBlock { .. } => "ResidualBlock",
        }
    }
}

/// One named layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerNode {
            name: name.into(),
            kind,
        }
    }

    /// Names of the parameter tensors this layer resolves in a weights
    /// store, derived from the layer name:
    ///
    /// * `Conv2d`: `{name}.weight` and, with a bias, `{name}.bias`
    /// * `BatchNorm2d`: `{name}.gamma`, `.beta`, `.mean`, `.var`
    /// * `Activation` (prelu only): `{name}.slope`
    /// * `Linear`: `{name}.weight`, `{name}.bias`
    /// * `ResidualBlock`: union of its sub-layers' references
    pub fn param_refs(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_param_refs(&mut out);
        out
    }

    fn collect_param_refs(&self, out: &mut Vec<String>) {
        match &self.kind {
            LayerKind::Conv2d { has_bias, .. } => {
                out.push(format!("{}.weight", self.name));
                if *has_bias {
                    out.push(format!("{}.bias", self.name));
                }
            }
            LayerKind::BatchNorm2d { .. } => {
                for suffix in ["gamma", "beta", "mean", "var"] {
                    out.push(format!("{}.{}", self.name, suffix));
                }
            }
            LayerKind::Activation { mode } => {
                if *mode == ActivationMode::Prelu {
                    out.push(format!("{}.slope", self.name));
                }
            }
            LayerKind::MaxPool2d { .. } | LayerKind::GlobalAvgPool => {}
            LayerKind::Linear { .. } => {
                out.push(format!("{}.weight", self.name));
                out.push(format!("{}.bias", self.name));
            }
            LayerKind::ResidualBlock { main, shortcut } => {
                for sub in main.iter().chain(shortcut) {
                    sub.collect_param_refs(out);
                }
            }
        }
    }

    /// Visit this node and (for residual blocks) every nested node.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a LayerNode)) {
        f(self);
        if let LayerKind::ResidualBlock { main, shortcut } = &self.kind {
            for sub in main.iter().chain(shortcut) {
                sub.visit(f);
            }
        }
    }
}

/// A full network description: declared input shape, ordered layers and a
/// free-form string metadata map.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerNode>,
    pub metadata: BTreeMap<String, String>,
}

impl NetworkSpec {
    /// Build and validate a description (name uniqueness plus an end-to-end
    /// shape inference pass at the declared input shape).
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerNode>) -> Result<Self> {
        let net = NetworkSpec {
            input_shape,
            layers,
            metadata: BTreeMap::new(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Check structural invariants: positive input dimensions, globally
    /// unique layer names (nested layers included) and a successful shape
    /// inference pass at the declared input shape.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Schema {
                path: "input_shape".into(),
                message: format!("dimensions must be positive, got {:?}", self.input_shape),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for layer in &self.layers {
            let mut dup = None;
            layer.visit(&mut |node| {
                if dup.is_none() && !seen.insert(node.name.clone()) {
                    dup = Some(node.name.clone());
                }
            });
            if let Some(name) = dup {
                return Err(Error::DuplicateLayer(name));
            }
        }
        infer_shapes(self, self.input_shape)?;
        Ok(())
    }

    /// All layer names in document order, nested layers included.
    pub fn flattened_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            layer.visit(&mut |node| names.push(node.name.clone()));
        }
        names
    }

    /// Top-level layer lookup by name.
    pub fn find_layer(&self, name: &str) -> Option<&LayerNode> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Index of a top-level layer.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Every parameter name the network resolves, in layer order.
    pub fn param_refs(&self) -> Vec<String> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.collect_param_refs(&mut out);
        }
        out
    }
}
