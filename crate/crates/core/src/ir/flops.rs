//! Cost accounting: multiply-accumulates, activation sizes, parameters.

use serde::Serialize;

use crate::ir::shape::fold_layer;
use crate::ir::{LayerKind, LayerNode, NetworkSpec};
use crate::Result;

/// Cost row for one top-level layer.
///
/// * `macs` — multiply-accumulate count (one multiply plus one add); a
///   convolution costs `c_out * c_in * k^2 * h_out * w_out` and a linear
///   layer `in * out`. Bias additions are not counted.
/// * `activation_elems` — number of output elements the layer produces;
///   BatchNorm and activations perform one elementwise operation per
///   element, so this column doubles as their op count. Residual blocks
///   sum their sub-layers and add one output's worth for the join.
/// * `param_elems` — stored parameter count (bias and running statistics
///   included).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub activation_elems: u64,
    pub param_elems: u64,
}

/// Per-layer cost table plus column totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub input_shape: [usize; 3],
    pub per_layer: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_activation_elems: u64,
    pub total_param_elems: u64,
}

impl FlopsReport {
    /// Row lookup by layer name.
    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.per_layer.iter().find(|r| r.name == name)
    }
}

fn elems(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

fn cost_of(layer: &LayerNode, input: &[usize]) -> Result<(LayerCost, Vec<usize>)> {
    let output = fold_layer(layer, input)?;
    let out_elems = elems(&output);
    let cost = match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            has_bias,
            ..
        } => {
            let k2 = (*kernel_size as u64) * (*kernel_size as u64);
            let spatial = (output[1] as u64) * (output[2] as u64);
            let weights = *out_channels as u64 * *in_channels as u64 * k2;
            LayerCost {
                name: layer.name.clone(),
                macs: weights * spatial,
                activation_elems: out_elems,
                param_elems: weights + if *has_bias { *out_channels as u64 } else { 0 },
            }
        }
        LayerKind::BatchNorm2d { channels, .. } => LayerCost {
            name: layer.name.clone(),
            macs: 0,
            activation_elems: out_elems,
            param_elems: 4 * *channels as u64,
        },
        LayerKind::Activation { mode } => LayerCost {
            name: layer.name.clone(),
            macs: 0,
            activation_elems: out_elems,
            param_elems: match mode {
                crate::ir::ActivationMode::Prelu => 1,
                crate::ir::ActivationMode::Relu => 0,
            },
        },
        LayerKind::MaxPool2d { .. } | LayerKind::GlobalAvgPool => LayerCost {
            name: layer.name.clone(),
            macs: 0,
            activation_elems: out_elems,
            param_elems: 0,
        },
        LayerKind::Linear {
            in_features,
            out_features,
        } => LayerCost {
            name: layer.name.clone(),
            macs: *in_features as u64 * *out_features as u64,
            activation_elems: out_elems,
            param_elems: *in_features as u64 * *out_features as u64 + *out_features as u64,
        },
        LayerKind::ResidualBlock { main, shortcut } => {
            let mut macs = 0u64;
            let mut act = 0u64;
            let mut params = 0u64;
            for chain in [main, shortcut] {
                let mut shape = input.to_vec();
                for sub in chain {
                    let (c, next) = cost_of(sub, &shape)?;
                    macs += c.macs;
                    act += c.activation_elems;
                    params += c.param_elems;
                    shape = next;
                }
            }
            LayerCost {
                name: layer.name.clone(),
                macs,
                // One extra output's worth for the post-addition activation.
                activation_elems: act + out_elems,
                param_elems: params,
            }
        }
    };
    Ok((cost, output))
}

/// Tabulate per-layer costs at the given input shape.
pub fn count_flops(net: &NetworkSpec, input_shape: [usize; 3]) -> Result<FlopsReport> {
    // Run the plain inference pass first so channel/shape errors surface
    // with the same messages regardless of entry point.
    crate::ir::infer_shapes(net, input_shape)?;

    let mut shape = input_shape.to_vec();
    let mut per_layer = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let (cost, next) = cost_of(layer, &shape)?;
        per_layer.push(cost);
        shape = next;
    }
    let total_macs = per_layer.iter().map(|r| r.macs).sum();
    let total_activation_elems = per_layer.iter().map(|r| r.activation_elems).sum();
    let total_param_elems = per_layer.iter().map(|r| r.param_elems).sum();
    Ok(FlopsReport {
        input_shape,
        per_layer,
        total_macs,
        total_activation_elems,
        total_param_elems,
    })
}
