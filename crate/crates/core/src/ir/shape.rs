//! Shape propagation through a network description.

use crate::ir::{LayerKind, LayerNode, NetworkSpec};
use crate::{Error, Result};

/// Output extent of a convolution along one spatial axis:
/// `floor((extent + 2*padding - kernel) / stride) + 1`.
///
/// Errors when the padded extent is smaller than the kernel, which is the
/// only way the formula can go non-positive.
pub fn conv_output_dim(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    layer: &str,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape {
            layer: layer.to_string(),
            message: format!(
                "padded extent {} is smaller than kernel {} (input extent {}, padding {})",
                padded, kernel, extent, padding
            ),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of an unpadded pooling window along one spatial axis.
pub fn pool_output_dim(extent: usize, kernel: usize, stride: usize, layer: &str) -> Result<usize> {
    conv_output_dim(extent, kernel, stride, 0, layer)
}

fn fold_chain(layers: &[LayerNode], mut shape: Vec<usize>) -> Result<Vec<usize>> {
    for layer in layers {
        shape = fold_layer(layer, &shape)?;
    }
    Ok(shape)
}

/// Output shape of a single layer given its input shape.
pub(crate) fn fold_layer(layer: &LayerNode, input: &[usize]) -> Result<Vec<usize>> {
    let spatial = |kind: &str| -> Result<(usize, usize, usize)> {
        match input {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::Shape {
                layer: layer.name.clone(),
                message: format!("{} expects a (c, h, w) input, got {:?}", kind, other),
            }),
        }
    };

    match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = spatial("Conv2d")?;
            if c != *in_channels {
                return Err(Error::ChannelMismatch {
                    layer: layer.name.clone(),
                    expected: *in_channels,
                    got: c,
                });
            }
            let oh = conv_output_dim(h, *kernel_size, *stride, *padding, &layer.name)?;
            let ow = conv_output_dim(w, *kernel_size, *stride, *padding, &layer.name)?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerKind::BatchNorm2d { channels, .. } => {
            let (c, h, w) = spatial("BatchNorm2d")?;
            if c != *channels {
                return Err(Error::ChannelMismatch {
                    layer: layer.name.clone(),
                    expected: *channels,
                    got: c,
                });
            }
            Ok(vec![c, h, w])
        }
        LayerKind::Activation { .. } => Ok(input.to_vec()),
        LayerKind::MaxPool2d {
            kernel_size,
            stride,
        } => {
            let (c, h, w) = spatial("MaxPool2d")?;
            if h < *kernel_size || w < *kernel_size {
                return Err(Error::Shape {
                    layer: layer.name.clone(),
                    message: format!(
                        "pooling window {} does not fit in ({}, {})",
                        kernel_size, h, w
                    ),
                });
            }
            let oh = pool_output_dim(h, *kernel_size, *stride, &layer.name)?;
            let ow = pool_output_dim(w, *kernel_size, *stride, &layer.name)?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = spatial("GlobalAvgPool")?;
            Ok(vec![c])
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => match input {
            [n] if *n == *in_features => Ok(vec![*out_features]),
            [n] => Err(Error::Shape {
                layer: layer.name.clone(),
                message: format!("Linear expects {} input features, got {}", in_features, n),
            }),
            other => Err(Error::Shape {
                layer: layer.name.clone(),
                message: format!("Linear expects a rank-1 input, got {:?}", other),
            }),
        },
        LayerKind::ResidualBlock { main, shortcut } => {
            let main_out = fold_chain(main, input.to_vec())?;
            let short_out = fold_chain(shortcut, input.to_vec())?;
            if main_out != short_out {
                return Err(Error::Shape {
                    layer: layer.name.clone(),
                    message: format!(
                        "residual branches disagree: main {:?} vs shortcut {:?}",
                        main_out, short_out
                    ),
                });
            }
            Ok(main_out)
        }
    }
}

/// Propagate an input shape through every top-level layer.
///
/// Returns one `(layer name, output shape)` row per top-level layer
/// (residual blocks appear as a single row). The input channel count must
/// match the network's declared input shape; height and width may differ,
/// which is how doubled-resolution variants are analysed.
pub fn infer_shapes(net: &NetworkSpec, input_shape: [usize; 3]) -> Result<Vec<(String, Vec<usize>)>> {
    if input_shape[0] != net.input_shape[0] {
        return Err(Error::Shape {
            layer: "<input>".to_string(),
            message: format!(
                "input has {} channels but the network declares {}",
                input_shape[0], net.input_shape[0]
            ),
        });
    }
    if input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape {
            layer: "<input>".to_string(),
            message: format!("input dimensions must be positive, got {:?}", input_shape),
        });
    }
    let mut shape = input_shape.to_vec();
    let mut rows = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        shape = fold_layer(layer, &shape)?;
        rows.push((layer.name.clone(), shape.clone()));
    }
    Ok(rows)
}

/// Shape of the network's final output at the given input shape.
pub fn output_shape(net: &NetworkSpec, input_shape: [usize; 3]) -> Result<Vec<usize>> {
    Ok(infer_shapes(net, input_shape)?
        .last()
        .map(|(_, s)| s.clone())
        .unwrap_or_else(|| input_shape.to_vec()))
}
