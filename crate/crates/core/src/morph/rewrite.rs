//! The graph rewrites: convolution splitting, identity-layer insertion and
//! resolution promotion.
//!
//! Every rewrite is a pure function from `(network, weights)` to new
//! values; inputs are never mutated, and each rewrite appends a
//! [`MorphRecord`] to the result's metadata.

use super::solver::{solve_kernel_factorization, SolverOptions};
use super::{
    append_record, make_identity_batchnorm, make_identity_prelu, morph_records, next_seq,
    MorphRecord,
};
use crate::container::WeightsStore;
use crate::error::{Error, Result};
use crate::ir::{infer_shapes, ActivationMode, LayerKind, LayerNode, NetworkSpec};
use crate::scalar::Scalar;
use crate::templates::DEFAULT_EPSILON;
use crate::tensor::Tensor;

/// Replace the named convolution with the four-layer chain
/// `conv(k1, stride 1) -> identity batch-norm -> identity PReLU ->
/// conv(k2, original stride)`, preserving the computed function on the
/// interior region unaffected by zero padding.
///
/// The two kernels come from [`solve_kernel_factorization`]; `c_mid`
/// defaults to the convolution's output channel count. The original
/// padding `p` is split across the pair as `p1 + p2 = p + (k1+k2-1-k)/2`
/// (first conv gets the floor), which keeps every downstream activation
/// shape unchanged. A bias, if present, moves onto the second convolution;
/// a bias on the first would be smeared by the second kernel and break
/// preservation.
///
/// The inserted layers are named `{base}_1`, `{base}_1_bn`, `{base}_1_act`
/// and `{base}_2` after the source convolution `{base}`.
pub fn split_conv<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    layer: &str,
    k1: usize,
    k2: usize,
    c_mid: Option<usize>,
    solver: &SolverOptions,
) -> Result<(NetworkSpec, WeightsStore<T>, MorphRecord)> {
    let pos = match net.position(layer) {
        Some(pos) => pos,
        None if net.flattened_names().iter().any(|n| n == layer) => {
            return Err(Error::Rewrite(format!(
                "layer '{layer}' sits inside a residual block; only top-level \
                 convolutions can be split"
            )));
        }
        None => return Err(Error::UnknownLayer(layer.to_string())),
    };
    let node = &net.layers[pos];
    let (c_in, c_out, k, stride, padding, has_bias) = match node.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            has_bias,
        } => (in_channels, out_channels, kernel_size, stride, padding, has_bias),
        ref other => {
            return Err(Error::Rewrite(format!(
                "layer '{layer}' is a {} layer; only convolutions can be split",
                other.kind_str()
            )));
        }
    };
    let c_mid = c_mid.unwrap_or(c_out);

    let names = [
        format!("{layer}_1"),
        format!("{layer}_1_bn"),
        format!("{layer}_1_act"),
        format!("{layer}_2"),
    ];
    let taken = net.flattened_names();
    for name in &names {
        if taken.iter().any(|n| n == name) {
            return Err(Error::DuplicateLayer(name.clone()));
        }
    }

    let kernel = store.get_checked(&format!("{layer}.weight"), &[c_out, c_in, k, k])?;
    if has_bias {
        store.get_checked(&format!("{layer}.bias"), &[c_out])?;
    }

    let result = solve_kernel_factorization(kernel, c_mid, k1, k2, solver)?;
    if !result.converged {
        return Err(Error::SolverDidNotConverge {
            residual: result.residual,
            tol: solver.tol,
            iterations: result.iterations,
        });
    }

    // Distribute the padding of the composed convolution across the pair.
    let ke = k1 + k2 - 1;
    let q = padding + (ke - k) / 2;
    let p1 = q / 2;
    let p2 = q - p1;

    let replacement = [
        LayerNode::new(
            names[0].clone(),
            LayerKind::Conv2d {
                in_channels: c_in,
                out_channels: c_mid,
                kernel_size: k1,
                stride: 1,
                padding: p1,
                has_bias: false,
            },
        ),
        LayerNode::new(
            names[1].clone(),
            LayerKind::BatchNorm2d {
                channels: c_mid,
                epsilon: DEFAULT_EPSILON,
            },
        ),
        LayerNode::new(
            names[2].clone(),
            LayerKind::Activation {
                mode: ActivationMode::Prelu,
            },
        ),
        LayerNode::new(
            names[3].clone(),
            LayerKind::Conv2d {
                in_channels: c_mid,
                out_channels: c_out,
                kernel_size: k2,
                stride,
                padding: p2,
                has_bias,
            },
        ),
    ];

    let mut layers = net.layers.clone();
    layers.splice(pos..pos + 1, replacement);
    let mut new_net = NetworkSpec::new(net.input_shape, layers)?;
    new_net.metadata = net.metadata.clone();

    // The replacement must be shape-neutral: same output where the old conv
    // stood, identical rows everywhere downstream.
    let old_rows = infer_shapes(net, net.input_shape)?;
    let new_rows = infer_shapes(&new_net, new_net.input_shape)?;
    if new_rows[pos + 3].1 != old_rows[pos].1 {
        return Err(Error::Rewrite(format!(
            "split of '{layer}' changed its output shape from {:?} to {:?}",
            old_rows[pos].1,
            new_rows[pos + 3].1
        )));
    }
    for (old, new) in old_rows[pos + 1..].iter().zip(&new_rows[pos + 4..]) {
        if old != new {
            return Err(Error::Rewrite(format!(
                "split of '{layer}' disturbed downstream layer '{}': shape {:?} became {:?} ('{}')",
                old.0, old.1, new.1, new.0
            )));
        }
    }

    let mut new_store = store.clone();
    new_store.remove(&format!("{layer}.weight"));
    new_store.insert(format!("{}.weight", names[0]), result.first);
    new_store.insert(format!("{}.weight", names[3]), result.second);
    if has_bias {
        let bias = new_store
            .remove(&format!("{layer}.bias"))
            .expect("bias presence checked above");
        new_store.insert(format!("{}.bias", names[3]), bias);
    }
    let bn = make_identity_batchnorm::<T>(c_mid, DEFAULT_EPSILON)?;
    new_store.insert(format!("{}.gamma", names[1]), bn.gamma);
    new_store.insert(format!("{}.beta", names[1]), bn.beta);
    new_store.insert(format!("{}.mean", names[1]), bn.mean);
    new_store.insert(format!("{}.var", names[1]), bn.var);
    let slope = make_identity_prelu().slope;
    new_store.insert(
        format!("{}.slope", names[2]),
        Tensor::full(vec![1], T::from_f64(slope)),
    );

    let record = MorphRecord::SplitConv {
        seq: next_seq(net)?,
        source: layer.to_string(),
        inserted: names.to_vec(),
        original_kernel: k,
        k1,
        k2,
        c_mid,
        residual: result.residual,
        iterations: result.iterations,
    };
    append_record(&mut new_net, &record)?;

    Ok((new_net, new_store, record))
}

/// Double the network's input resolution while keeping every layer behind
/// the front at its original shapes and compute.
///
/// The front must be a convolution pair produced by [`split_conv`] (looked
/// up through the metadata records); a plain convolution at the front is
/// split first with `k1 = 5, k2 = 3` and `c_mid` equal to its output
/// channels. The first convolution of the pair is then re-strided to 2
/// with centre padding, a 2x2 max-pool (stride 2) named `{front}_pool` is
/// inserted behind its activation, and the second convolution drops to
/// stride 1 with centre padding. At the doubled input the second
/// convolution's output shape equals the original convolution's output at
/// the original input, so everything downstream is untouched — shapes,
/// compute and parameters alike.
///
/// Unlike splitting, promotion changes the function (the input domain
/// itself changes); its contract is shape and compute preservation, which
/// this routine re-checks before returning.
///
/// Returns the records appended by this call: one for the promotion,
/// preceded by one for the internal split when the front had to be split.
pub fn promote_resolution<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    solver: &SolverOptions,
) -> Result<(NetworkSpec, WeightsStore<T>, Vec<MorphRecord>)> {
    let front = net.layers.first().ok_or_else(|| {
        Error::Rewrite("cannot promote an empty network".to_string())
    })?;
    if !matches!(front.kind, LayerKind::Conv2d { .. }) {
        return Err(Error::Rewrite(format!(
            "promotion needs a convolution at the front, found {} layer '{}'",
            front.kind.kind_str(),
            front.name
        )));
    }

    let mut records_out = Vec::new();
    let (work_net, work_store) = if front_is_pending_split(net)? {
        (net.clone(), store.clone())
    } else {
        let front_name = front.name.clone();
        let (split_net, split_store, split_record) =
            split_conv(net, store, &front_name, 5, 3, None, solver)?;
        records_out.push(split_record);
        (split_net, split_store)
    };

    // The front is now conv -> bn -> act -> conv with a stride-1 first half.
    let (k1, conv_a_name) = match &work_net.layers[0].kind {
        LayerKind::Conv2d {
            kernel_size,
            stride: 1,
            ..
        } => (*kernel_size, work_net.layers[0].name.clone()),
        _ => {
            return Err(Error::Rewrite(format!(
                "front convolution '{}' is already strided; it was not left by a split",
                work_net.layers[0].name
            )));
        }
    };
    let (k2, stride_b) = match &work_net.layers[3].kind {
        LayerKind::Conv2d {
            kernel_size,
            stride,
            ..
        } => (*kernel_size, *stride),
        _ => unreachable!("pending-front check guarantees a convolution at index 3"),
    };
    if stride_b != 2 {
        return Err(Error::Rewrite(format!(
            "promotion requires the front to downsample by 2, but the second \
             convolution has stride {stride_b}"
        )));
    }
    if k1 % 2 == 0 || k2 % 2 == 0 {
        return Err(Error::Rewrite(format!(
            "promotion needs odd front kernels for centre padding, got {k1} and {k2}"
        )));
    }

    let pool_name = format!("{conv_a_name}_pool");
    if work_net.flattened_names().iter().any(|n| n == &pool_name) {
        return Err(Error::Rewrite(format!(
            "cannot insert pooling layer '{pool_name}': the name is already taken"
        )));
    }

    let [c, h, w] = work_net.input_shape;
    let input_after = [c, 2 * h, 2 * w];

    let mut layers = work_net.layers.clone();
    match &mut layers[0].kind {
        LayerKind::Conv2d {
            stride, padding, ..
        } => {
            *stride = 2;
            *padding = (k1 - 1) / 2;
        }
        _ => unreachable!("checked above"),
    }
    layers.insert(
        3,
        LayerNode::new(
            pool_name.clone(),
            LayerKind::MaxPool2d {
                kernel_size: 2,
                stride: 2,
            },
        ),
    );
    match &mut layers[4].kind {
        LayerKind::Conv2d {
            stride, padding, ..
        } => {
            *stride = 1;
            *padding = (k2 - 1) / 2;
        }
        _ => unreachable!("checked above"),
    }

    let mut new_net = NetworkSpec::new(input_after, layers)?;
    new_net.metadata = work_net.metadata.clone();

    // Everything from the second convolution onward must line up exactly.
    let old_rows = infer_shapes(&work_net, work_net.input_shape)?;
    let new_rows = infer_shapes(&new_net, new_net.input_shape)?;
    if new_rows[4].1 != old_rows[3].1 {
        return Err(Error::Rewrite(format!(
            "promotion moved the front's output shape from {:?} to {:?}; \
             the input dimensions probably do not divide evenly",
            old_rows[3].1, new_rows[4].1
        )));
    }
    for (old, new) in old_rows[4..].iter().zip(&new_rows[5..]) {
        if old != new {
            return Err(Error::Rewrite(format!(
                "promotion disturbed downstream layer '{}': shape {:?} became {:?}",
                old.0, old.1, new.1
            )));
        }
    }

    let record = MorphRecord::PromoteResolution {
        seq: next_seq(&work_net)?,
        source: conv_a_name,
        inserted: vec![pool_name],
        residual: 0.0,
        input_before: work_net.input_shape,
        input_after,
    };
    append_record(&mut new_net, &record)?;
    records_out.push(record);

    Ok((new_net, work_store, records_out))
}

/// Does the network start with the four layers of an un-promoted split
/// front (conv with stride 1, batch-norm, activation, conv), as recorded in
/// its metadata?
fn front_is_pending_split(net: &NetworkSpec) -> Result<bool> {
    if net.layers.len() < 4 {
        return Ok(false);
    }
    let records = morph_records(net)?;
    let front_names: Vec<&str> = net.layers[..4].iter().map(|l| l.name.as_str()).collect();
    let matches_record = records.iter().any(|r| match r {
        MorphRecord::SplitConv { inserted, .. } => {
            inserted.len() == 4 && inserted.iter().map(String::as_str).eq(front_names.iter().copied())
        }
        _ => false,
    });
    if !matches_record {
        return Ok(false);
    }
    let kinds_fit = matches!(
        net.layers[0].kind,
        LayerKind::Conv2d { stride: 1, .. }
    ) && matches!(net.layers[1].kind, LayerKind::BatchNorm2d { .. })
        && matches!(net.layers[2].kind, LayerKind::Activation { .. })
        && matches!(net.layers[3].kind, LayerKind::Conv2d { .. });
    Ok(kinds_fit)
}

/// Index at which a new top-level layer should sit: directly after the
/// named layer, or at the very front.
fn insertion_index(net: &NetworkSpec, after: Option<&str>) -> Result<usize> {
    match after {
        None => Ok(0),
        Some(name) => match net.position(name) {
            Some(pos) => Ok(pos + 1),
            None if net.flattened_names().iter().any(|n| n == name) => {
                Err(Error::Rewrite(format!(
                    "layer '{name}' sits inside a residual block; insertions are \
                     top-level only"
                )))
            }
            None => Err(Error::UnknownLayer(name.to_string())),
        },
    }
}

/// The activation shape flowing into the given top-level insertion point.
fn shape_at(net: &NetworkSpec, index: usize) -> Result<Vec<usize>> {
    if index == 0 {
        Ok(net.input_shape.to_vec())
    } else {
        Ok(infer_shapes(net, net.input_shape)?[index - 1].1.clone())
    }
}

fn check_fresh_name(net: &NetworkSpec, name: &str) -> Result<()> {
    if net.flattened_names().iter().any(|n| n == name) {
        Err(Error::DuplicateLayer(name.to_string()))
    } else {
        Ok(())
    }
}

/// Insert a batch-normalisation layer that is an exact identity (see
/// [`make_identity_batchnorm`]) after the named top-level layer, or at the
/// front when `after` is `None`. The forward output is bit-identical
/// before and after.
pub fn insert_identity_batchnorm<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    after: Option<&str>,
    name: &str,
    epsilon: f64,
) -> Result<(NetworkSpec, WeightsStore<T>)> {
    let index = insertion_index(net, after)?;
    check_fresh_name(net, name)?;
    let shape = shape_at(net, index)?;
    let channels = match shape[..] {
        [c, _, _] => c,
        _ => {
            return Err(Error::Rewrite(format!(
                "cannot insert a batch-norm at this point: the activation has \
                 shape {shape:?}, need (C, H, W)"
            )));
        }
    };

    let params = make_identity_batchnorm::<T>(channels, epsilon)?;
    let mut layers = net.layers.clone();
    layers.insert(
        index,
        LayerNode::new(
            name,
            LayerKind::BatchNorm2d {
                channels,
                epsilon,
            },
        ),
    );
    let mut new_net = NetworkSpec::new(net.input_shape, layers)?;
    new_net.metadata = net.metadata.clone();

    let mut new_store = store.clone();
    new_store.insert(format!("{name}.gamma"), params.gamma);
    new_store.insert(format!("{name}.beta"), params.beta);
    new_store.insert(format!("{name}.mean"), params.mean);
    new_store.insert(format!("{name}.var"), params.var);
    Ok((new_net, new_store))
}

/// Insert a PReLU with slope 1 — the identity function — after the named
/// top-level layer, or at the front when `after` is `None`. The forward
/// output is bit-identical before and after.
pub fn insert_identity_prelu<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    after: Option<&str>,
    name: &str,
) -> Result<(NetworkSpec, WeightsStore<T>)> {
    let index = insertion_index(net, after)?;
    check_fresh_name(net, name)?;
    let shape = shape_at(net, index)?;
    if shape.len() != 3 {
        return Err(Error::Rewrite(format!(
            "cannot insert an activation at this point: the activation there has \
             shape {shape:?}, need (C, H, W)"
        )));
    }

    let mut layers = net.layers.clone();
    layers.insert(
        index,
        LayerNode::new(
            name,
            LayerKind::Activation {
                mode: ActivationMode::Prelu,
            },
        ),
    );
    let mut new_net = NetworkSpec::new(net.input_shape, layers)?;
    new_net.metadata = net.metadata.clone();

    let mut new_store = store.clone();
    new_store.insert(
        format!("{name}.slope"),
        Tensor::full(vec![1], T::from_f64(make_identity_prelu().slope)),
    );
    Ok((new_net, new_store))
}
