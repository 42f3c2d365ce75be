//! JSON (de)serialisation of network descriptions.
//!
//! The document layout is strict: exactly the keys listed below, nothing
//! else, and every violation is reported with the path of the offending
//! field.
//!
//! ```json
//! {
//!   "input_shape": [3, 224, 224],
//!   "layers": [
//!     {"name": "conv1", "kind": "Conv2d", "in_channels": 3, "out_channels": 64,
//!      "kernel_size": 7, "stride": 2, "padding": 3, "has_bias": false},
//!     {"name": "relu", "kind": "Activation", "mode": "relu"}
//!   ],
//!   "metadata": {"free": "form strings"}
//! }
//! ```

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::ir::{ActivationMode, LayerKind, LayerNode, NetworkSpec};
use crate::{Error, Result};

fn err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| err(path, "expected an object"))
}

fn get<'a>(map: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    map.get(key)
        .ok_or_else(|| err(format!("{path}.{key}"), "missing required field"))
}

fn get_str(map: &Map<String, Value>, path: &str, key: &str) -> Result<String> {
    get(map, path, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| err(format!("{path}.{key}"), "expected a string"))
}

fn get_bool(map: &Map<String, Value>, path: &str, key: &str) -> Result<bool> {
    get(map, path, key)?
        .as_bool()
        .ok_or_else(|| err(format!("{path}.{key}"), "expected a boolean"))
}

/// Non-negative integer field (padding may legitimately be zero).
fn get_uint(map: &Map<String, Value>, path: &str, key: &str) -> Result<usize> {
    get(map, path, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| err(format!("{path}.{key}"), "expected a non-negative integer"))
}

/// Strictly positive integer field.
fn get_pos(map: &Map<String, Value>, path: &str, key: &str) -> Result<usize> {
    let v = get_uint(map, path, key)?;
    if v == 0 {
        return Err(err(format!("{path}.{key}"), "expected a positive integer"));
    }
    Ok(v)
}

fn reject_unknown(map: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(err(format!("{path}.{key}"), "unknown field"));
        }
    }
    Ok(())
}

fn parse_layers(v: &Value, path: &str) -> Result<Vec<LayerNode>> {
    let arr = v
        .as_array()
        .ok_or_else(|| err(path, "expected an array of layer objects"))?;
    arr.iter()
        .enumerate()
        .map(|(i, layer)| parse_layer(layer, &format!("{path}[{i}]")))
        .collect()
}

fn parse_layer(v: &Value, path: &str) -> Result<LayerNode> {
    let map = as_object(v, path)?;
    let name = get_str(map, path, "name")?;
    if name.is_empty() {
        return Err(err(format!("{path}.name"), "layer name must be non-empty"));
    }
    let kind_tag = get_str(map, path, "kind")?;

    let kind = match kind_tag.as_str() {
        "Conv2d" => {
            reject_unknown(
                map,
                path,
                &[
                    "name",
                    "kind",
                    "in_channels",
                    "out_channels",
                    "kernel_size",
                    "stride",
                    "padding",
                    "has_bias",
                ],
            )?;
            LayerKind::Conv2d {
                in_channels: get_pos(map, path, "in_channels")?,
                out_channels: get_pos(map, path, "out_channels")?,
                kernel_size: get_pos(map, path, "kernel_size")?,
                stride: get_pos(map, path, "stride")?,
                padding: get_uint(map, path, "padding")?,
                has_bias: get_bool(map, path, "has_bias")?,
            }
        }
        "BatchNorm2d" => {
            reject_unknown(map, path, &["name", "kind", "channels", "epsilon"])?;
            let epsilon = get(map, path, "epsilon")?
                .as_f64()
                .ok_or_else(|| err(format!("{path}.epsilon"), "expected a number"))?;
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(err(
                    format!("{path}.epsilon"),
                    format!("must be a positive finite number, got {epsilon}"),
                ));
            }
            LayerKind::BatchNorm2d {
                channels: get_pos(map, path, "channels")?,
                epsilon,
            }
        }
        "Activation" => {
            reject_unknown(map, path, &["name", "kind", "mode"])?;
            let mode = match get_str(map, path, "mode")?.as_str() {
                "relu" => ActivationMode::Relu,
                "prelu" => ActivationMode::Prelu,
                other => {
                    return Err(err(
                        format!("{path}.mode"),
                        format!("unknown activation mode `{other}` (expected `relu` or `prelu`)"),
                    ))
                }
            };
            LayerKind::Activation { mode }
        }
        "MaxPool2d" => {
            reject_unknown(map, path, &["name", "kind", "kernel_size", "stride"])?;
            LayerKind::MaxPool2d {
                kernel_size: get_pos(map, path, "kernel_size")?,
                stride: get_pos(map, path, "stride")?,
            }
        }
        "GlobalAvgPool" => {
            reject_unknown(map, path, &["name", "kind"])?;
            LayerKind::GlobalAvgPool
        }
        "Linear" => {
            reject_unknown(map, path, &["name", "kind", "in_features", "out_features"])?;
            LayerKind::Linear {
                in_features: get_pos(map, path, "in_features")?,
                out_features: get_pos(map, path, "out_features")?,
            }
        }
        "ResidualBlock" => {
            reject_unknown(map, path, &["name", "kind", "main", "shortcut"])?;
            let main = parse_layers(get(map, path, "main")?, &format!("{path}.main"))?;
            if main.is_empty() {
                return Err(err(
                    format!("{path}.main"),
                    "residual main path must not be empty",
                ));
            }
            let shortcut =
                parse_layers(get(map, path, "shortcut")?, &format!("{path}.shortcut"))?;
            LayerKind::ResidualBlock { main, shortcut }
        }
        other => {
            return Err(err(
                format!("{path}.kind"),
                format!(
                    "unknown layer kind `{other}` (expected Conv2d, BatchNorm2d, Activation, \
                     MaxPool2d, GlobalAvgPool, Linear or ResidualBlock)"
                ),
            ))
        }
    };

    Ok(LayerNode { name, kind })
}

/// Parse and validate a network description document.
///
/// Validation covers the strict schema (unknown fields are rejected with
/// the offending path), global layer-name uniqueness and an end-to-end
/// shape-inference pass at the declared input shape, so a returned value
/// is always executable.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let root: Value = serde_json::from_str(text)?;
    let map = as_object(&root, "$")?;
    reject_unknown(map, "$", &["input_shape", "layers", "metadata"])?;

    let shape_val = get(map, "$", "input_shape")?;
    let arr = shape_val
        .as_array()
        .ok_or_else(|| err("$.input_shape", "expected an array of 3 positive integers"))?;
    if arr.len() != 3 {
        return Err(err(
            "$.input_shape",
            format!("expected 3 dimensions (c, h, w), got {}", arr.len()),
        ));
    }
    let mut input_shape = [0usize; 3];
    for (i, v) in arr.iter().enumerate() {
        input_shape[i] = v
            .as_u64()
            .filter(|&d| d > 0)
            .map(|d| d as usize)
            .ok_or_else(|| err(format!("$.input_shape[{i}]"), "expected a positive integer"))?;
    }

    let layers = parse_layers(get(map, "$", "layers")?, "$.layers")?;

    let mut metadata = BTreeMap::new();
    if let Some(meta_val) = map.get("metadata") {
        let meta = as_object(meta_val, "$.metadata")?;
        for (k, v) in meta {
            let s = v.as_str().ok_or_else(|| {
                err(format!("$.metadata.{k}"), "metadata values must be strings")
            })?;
            metadata.insert(k.clone(), s.to_string());
        }
    }

    let mut net = NetworkSpec::new(input_shape, layers)?;
    net.metadata = metadata;
    Ok(net)
}

fn layer_value(layer: &LayerNode) -> Value {
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            has_bias,
        } => json!({
            "name": name,
            "kind": "Conv2d",
            "in_channels": in_channels,
            "out_channels": out_channels,
            "kernel_size": kernel_size,
            "stride": stride,
            "padding": padding,
            "has_bias": has_bias,
        }),
        LayerKind::BatchNorm2d { channels, epsilon } => json!({
            "name": name,
            "kind": "BatchNorm2d",
            "channels": channels,
            "epsilon": epsilon,
        }),
        LayerKind::Activation { mode } => json!({
            "name": name,
            "kind": "Activation",
            "mode": mode.as_str(),
        }),
        LayerKind::MaxPool2d {
            kernel_size,
            stride,
        } => json!({
            "name": name,
            "kind": "MaxPool2d",
            "kernel_size": kernel_size,
            "stride": stride,
        }),
        LayerKind::GlobalAvgPool => json!({
            "name": name,
            "kind": "GlobalAvgPool",
        }),
        LayerKind::Linear {
            in_features,
            out_features,
        } => json!({
            "name": name,
            "kind": "Linear",
            "in_features": in_features,
            "out_features": out_features,
        }),
        LayerKind::ResidualBlock { main, shortcut } => json!({
            "name": name,
            "kind": "ResidualBlock",
            "main": main.iter().map(layer_value).collect::<Vec<_>>(),
            "shortcut": shortcut.iter().map(layer_value).collect::<Vec<_>>(),
        }),
    }
}

/// Serialise a network description to canonical pretty-printed JSON
/// (alphabetical keys, trailing newline). `parse_network` of the result
/// reproduces the input structure exactly.
pub fn serialize_network(net: &NetworkSpec) -> String {
    let doc = json!({
        "input_shape": net.input_shape,
        "layers": net.layers.iter().map(layer_value).collect::<Vec<_>>(),
        "metadata": net.metadata,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("network documents are always serialisable");
    text.push('\n');
    text
}
