//! Verification harness for network rewrites.
//!
//! Four checks, one per preserved quantity:
//!
//! - [`verify_function_preservation`]: run both networks on the same random
//!   inputs and bound the output difference. In *exact-interior* mode the
//!   comparison is restricted to the activations whose receptive fields
//!   never touch zero padding — the region where a convolution split is
//!   provably exact. In *statistical* mode whole outputs are compared,
//!   useful as an informational diff where borders are expected to differ.
//! - [`verify_shape_preservation`]: per-layer output shapes from a given
//!   layer onward are identical between two networks (possibly evaluated at
//!   different input sizes, as after a resolution promotion).
//! - [`verify_flops_preservation`]: the same comparison over per-layer
//!   multiply-accumulate counts.
//! - [`verify_effective_kernel`]: the composed kernel extent of a recorded
//!   split matches its layers and covers the original kernel.
//!
//! All reports serialize to JSON and are deterministic for a fixed seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::container::WeightsStore;
use crate::engine::{forward, forward_at};
use crate::error::{Error, Result};
use crate::ir::{count_flops, fold_layer, infer_shapes, LayerKind, LayerNode, NetworkSpec};
use crate::morph::MorphRecord;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// How [`verify_function_preservation`] compares activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyMode {
    /// Compare only activations whose receptive field stays inside the
    /// original input — exact up to the solver residual and rounding.
    ExactInterior,
    /// Compare entire outputs, borders included.
    Statistical,
}

impl VerifyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VerifyMode::ExactInterior => "exact-interior",
            VerifyMode::Statistical => "statistical",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "exact-interior" => Ok(VerifyMode::ExactInterior),
            "statistical" => Ok(VerifyMode::Statistical),
            other => Err(Error::Param {
                name: "mode".into(),
                message: format!(
                    "unknown mode '{other}'; expected exact-interior or statistical"
                ),
            }),
        }
    }
}

/// Knobs for [`verify_function_preservation`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub mode: VerifyMode,
    /// Number of random inputs.
    pub samples: usize,
    pub seed: u64,
    /// Absolute tolerance; defaults to 1e-4 for f32 weights and 1e-8 for
    /// f64 weights.
    pub tol_abs: Option<f64>,
    /// Optional relative tolerance; when set, a sample may also pass by
    /// relative closeness.
    pub tol_rel: Option<f64>,
    /// Compare at this top-level layer instead of the final output.
    pub compare_at: Option<String>,
    /// Input shape to evaluate at; defaults to the first network's
    /// declared input shape.
    pub input_shape: Option<[usize; 3]>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            mode: VerifyMode::ExactInterior,
            samples: 16,
            seed: 0,
            tol_abs: None,
            tol_rel: None,
            compare_at: None,
            input_shape: None,
        }
    }
}

fn default_tol_abs(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-4,
        DType::F64 => 1e-8,
    }
}

/// One layer's output shape, for the report tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerShape {
    pub layer: String,
    pub shape: Vec<usize>,
}

/// Half-open `[lo, hi)` pixel window kept by the interior crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CropWindow {
    pub y: [usize; 2],
    pub x: [usize; 2],
}

/// Outcome of a function-preservation check.
#[derive(Debug, Clone, Serialize)]
pub struct PreservationReport {
    pub mode: VerifyMode,
    pub samples: usize,
    pub seed: u64,
    pub input_shape: [usize; 3],
    /// Layer the comparison ran at; `None` means the final output.
    pub compare_at: Option<String>,
    /// Interior window compared (exact-interior mode on spatial maps).
    pub crop: Option<CropWindow>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub tol_abs: f64,
    pub tol_rel: Option<f64>,
    pub pass: bool,
    pub shapes_a: Vec<LayerShape>,
    pub shapes_b: Vec<LayerShape>,
}

/// Per-pixel clean region: activations whose receptive field avoided all
/// zero padding. Tracked exactly through the layer chain.
#[derive(Debug, Clone, Copy, PartialEq)]
enum CleanRegion {
    /// Clean rows `y.0..y.1` and columns `x.0..x.1` of a spatial map.
    Spatial { y: (i64, i64), x: (i64, i64) },
    /// Past a global pooling or linear layer the map has collapsed; the
    /// value is clean only if the whole map fed into it was clean.
    Flat { clean: bool },
}

impl CleanRegion {
    fn full(h: usize, w: usize) -> Self {
        CleanRegion::Spatial {
            y: (0, h as i64),
            x: (0, w as i64),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            CleanRegion::Spatial { y, x } => y.1 <= y.0 || x.1 <= x.0,
            CleanRegion::Flat { clean } => !clean,
        }
    }

    fn intersect(self, other: Self) -> Result<Self> {
        match (self, other) {
            (CleanRegion::Spatial { y: ya, x: xa }, CleanRegion::Spatial { y: yb, x: xb }) => {
                Ok(CleanRegion::Spatial {
                    y: (ya.0.max(yb.0), ya.1.min(yb.1)),
                    x: (xa.0.max(xb.0), xa.1.min(xb.1)),
                })
            }
            (CleanRegion::Flat { clean: a }, CleanRegion::Flat { clean: b }) => {
                Ok(CleanRegion::Flat { clean: a && b })
            }
            _ => Err(Error::Verify(
                "cannot intersect a spatial clean region with a collapsed one".into(),
            )),
        }
    }
}

/// Fold a clean interval through one window op: output position `o` reads
/// input `[o*stride - padding, o*stride - padding + kernel)`, so it stays
/// clean iff that whole window lies inside the clean input interval.
fn fold_axis(
    interval: (i64, i64),
    kernel: usize,
    stride: usize,
    padding: usize,
    out_extent: usize,
) -> (i64, i64) {
    let (lo, hi) = interval;
    if hi <= lo {
        return (0, 0);
    }
    let (k, s, p) = (kernel as i64, stride as i64, padding as i64);
    // ceil((lo + p) / s): lo >= 0 here, so plain rounding-up division works.
    let lo_out = (lo + p + s - 1).div_euclid(s);
    let hi_out = (hi + p - k).div_euclid(s) + 1;
    let lo_out = lo_out.max(0);
    let hi_out = hi_out.min(out_extent as i64);
    if hi_out <= lo_out {
        (0, 0)
    } else {
        (lo_out, hi_out)
    }
}

/// Advance the clean region across one layer. `in_shape`/`out_shape` are
/// the activation shapes around the layer at the evaluation input size.
fn fold_region(
    region: CleanRegion,
    layer: &LayerNode,
    in_shape: &[usize],
    out_shape: &[usize],
) -> Result<CleanRegion> {
    match (&layer.kind, region) {
        (
            LayerKind::Conv2d {
                kernel_size,
                stride,
                padding,
                ..
            },
            CleanRegion::Spatial { y, x },
        ) => {
            let (h_out, w_out) = (out_shape[1], out_shape[2]);
            Ok(CleanRegion::Spatial {
                y: fold_axis(y, *kernel_size, *stride, *padding, h_out),
                x: fold_axis(x, *kernel_size, *stride, *padding, w_out),
            })
        }
        (
            LayerKind::MaxPool2d {
                kernel_size,
                stride,
            },
            CleanRegion::Spatial { y, x },
        ) => {
            let (h_out, w_out) = (out_shape[1], out_shape[2]);
            Ok(CleanRegion::Spatial {
                y: fold_axis(y, *kernel_size, *stride, 0, h_out),
                x: fold_axis(x, *kernel_size, *stride, 0, w_out),
            })
        }
        (LayerKind::BatchNorm2d { .. } | LayerKind::Activation { .. }, region) => Ok(region),
        (LayerKind::GlobalAvgPool, CleanRegion::Spatial { y, x }) => {
            let clean = y == (0, in_shape[1] as i64) && x == (0, in_shape[2] as i64);
            Ok(CleanRegion::Flat { clean })
        }
        (LayerKind::Linear { .. }, CleanRegion::Flat { clean }) => {
            Ok(CleanRegion::Flat { clean })
        }
        (LayerKind::ResidualBlock { main, shortcut }, CleanRegion::Spatial { .. }) => {
            let main_region = fold_chain(region, main, in_shape)?;
            let shortcut_region = fold_chain(region, shortcut, in_shape)?;
            main_region.intersect(shortcut_region)
        }
        (kind, _) => Err(Error::Verify(format!(
            "clean-region tracking does not support a {} layer over a collapsed map",
            kind.kind_str()
        ))),
    }
}

fn fold_chain(
    mut region: CleanRegion,
    layers: &[LayerNode],
    in_shape: &[usize],
) -> Result<CleanRegion> {
    let mut shape = in_shape.to_vec();
    for layer in layers {
        let out_shape = fold_layer(layer, &shape)?;
        region = fold_region(region, layer, &shape, &out_shape)?;
        shape = out_shape;
    }
    Ok(region)
}

fn shape_table(rows: &[(String, Vec<usize>)]) -> Vec<LayerShape> {
    rows.iter()
        .map(|(layer, shape)| LayerShape {
            layer: layer.clone(),
            shape: shape.clone(),
        })
        .collect()
}

/// Run both networks on the same seeded standard-normal inputs and report
/// the largest output difference, restricted to the padding-free interior
/// in [`VerifyMode::ExactInterior`] mode.
pub fn verify_function_preservation<T: Scalar>(
    net_a: &NetworkSpec,
    store_a: &WeightsStore<T>,
    net_b: &NetworkSpec,
    store_b: &WeightsStore<T>,
    opts: &VerifyOptions,
) -> Result<PreservationReport> {
    if opts.samples == 0 {
        return Err(Error::Param {
            name: "samples".into(),
            message: "need at least one sample".into(),
        });
    }
    let input_shape = opts.input_shape.unwrap_or(net_a.input_shape);

    let rows_a = infer_shapes(net_a, input_shape)?;
    let rows_b = infer_shapes(net_b, input_shape)?;

    let end_a = compare_end(net_a, opts.compare_at.as_deref())?;
    let end_b = compare_end(net_b, opts.compare_at.as_deref())?;
    let out_shape_a = row_shape(&rows_a, end_a, input_shape);
    let out_shape_b = row_shape(&rows_b, end_b, input_shape);
    if out_shape_a != out_shape_b {
        return Err(Error::Verify(format!(
            "comparison point has shape {out_shape_a:?} in the first network but \
             {out_shape_b:?} in the second"
        )));
    }

    let crop = match opts.mode {
        VerifyMode::Statistical => None,
        VerifyMode::ExactInterior => {
            let start = CleanRegion::full(input_shape[1], input_shape[2]);
            let region_a = fold_chain(start, &net_a.layers[..end_a], &input_shape)?;
            let region_b = fold_chain(start, &net_b.layers[..end_b], &input_shape)?;
            let region = region_a.intersect(region_b)?;
            if region.is_empty() {
                return Err(Error::Verify(
                    "no padding-free interior remains at the comparison point; \
                     use a larger input or statistical mode"
                        .into(),
                ));
            }
            match region {
                CleanRegion::Flat { .. } => None,
                CleanRegion::Spatial { y, x } => Some(CropWindow {
                    y: [y.0 as usize, y.1 as usize],
                    x: [x.0 as usize, x.1 as usize],
                }),
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal is well-formed");
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..opts.samples {
        let input: Tensor<T> = Tensor::from_fn(input_shape.to_vec(), |_| {
            T::from_f64(normal.sample(&mut rng))
        });
        let out_a = run_to(net_a, store_a, &input, opts.compare_at.as_deref())?;
        let out_b = run_to(net_b, store_b, &input, opts.compare_at.as_deref())?;
        accumulate_diffs(&out_a, &out_b, crop.as_ref(), &mut max_abs, &mut max_rel);
    }

    let tol_abs = opts.tol_abs.unwrap_or_else(|| default_tol_abs(T::DTYPE));
    let pass = max_abs <= tol_abs || opts.tol_rel.is_some_and(|t| max_rel <= t);
    Ok(PreservationReport {
        mode: opts.mode,
        samples: opts.samples,
        seed: opts.seed,
        input_shape,
        compare_at: opts.compare_at.clone(),
        crop,
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        tol_abs,
        tol_rel: opts.tol_rel,
        pass,
        shapes_a: shape_table(&rows_a),
        shapes_b: shape_table(&rows_b),
    })
}

fn compare_end(net: &NetworkSpec, compare_at: Option<&str>) -> Result<usize> {
    match compare_at {
        None => Ok(net.layers.len()),
        Some(name) => net
            .position(name)
            .map(|p| p + 1)
            .ok_or_else(|| Error::UnknownLayer(name.to_string())),
    }
}

fn row_shape(
    rows: &[(String, Vec<usize>)],
    end: usize,
    input_shape: [usize; 3],
) -> Vec<usize> {
    if end == 0 {
        input_shape.to_vec()
    } else {
        rows[end - 1].1.clone()
    }
}

fn run_to<T: Scalar>(
    net: &NetworkSpec,
    store: &WeightsStore<T>,
    input: &Tensor<T>,
    compare_at: Option<&str>,
) -> Result<Tensor<T>> {
    match compare_at {
        None => forward(net, store, input),
        Some(layer) => forward_at(net, store, input, layer),
    }
}

fn accumulate_diffs<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    crop: Option<&CropWindow>,
    max_abs: &mut f64,
    max_rel: &mut f64,
) {
    let mut record = |va: T, vb: T| {
        let (fa, fb) = (va.into_f64(), vb.into_f64());
        let abs = (fa - fb).abs();
        let scale = fa.abs().max(fb.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        if abs > *max_abs {
            *max_abs = abs;
        }
        if rel > *max_rel {
            *max_rel = rel;
        }
    };
    match crop {
        None => {
            for (va, vb) in a.data().iter().zip(b.data()) {
                record(*va, *vb);
            }
        }
        Some(window) => {
            let shape = a.shape();
            let (c, _h, w) = (shape[0], shape[1], shape[2]);
            let plane = shape[1] * shape[2];
            for ch in 0..c {
                for y in window.y[0]..window.y[1] {
                    for x in window.x[0]..window.x[1] {
                        let idx = ch * plane + y * w + x;
                        record(a.data()[idx], b.data()[idx]);
                    }
                }
            }
        }
    }
}

/// One paired row of a shape or MACs comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow<V: Serialize> {
    pub layer_a: Option<String>,
    pub value_a: Option<V>,
    pub layer_b: Option<String>,
    pub value_b: Option<V>,
    pub equal: bool,
}

/// Result of a per-layer suffix comparison between two networks.
#[derive(Debug, Clone, Serialize)]
pub struct SuffixComparison<V: Serialize> {
    pub from_layer: String,
    pub pass: bool,
    pub rows: Vec<ComparisonRow<V>>,
}

fn compare_suffixes<V: Clone + PartialEq + Serialize>(
    rows_a: &[(String, V)],
    rows_b: &[(String, V)],
    from_layer: &str,
    pos_a: Option<usize>,
    pos_b: Option<usize>,
) -> Result<SuffixComparison<V>> {
    let start_a = pos_a.ok_or_else(|| Error::UnknownLayer(from_layer.to_string()))?;
    let start_b = pos_b.ok_or_else(|| Error::UnknownLayer(from_layer.to_string()))?;
    let tail_a = &rows_a[start_a..];
    let tail_b = &rows_b[start_b..];
    let len = tail_a.len().max(tail_b.len());
    let mut rows = Vec::with_capacity(len);
    let mut pass = true;
    for i in 0..len {
        let a = tail_a.get(i);
        let b = tail_b.get(i);
        let equal = match (a, b) {
            (Some((name_a, value_a)), Some((name_b, value_b))) => {
                name_a == name_b && value_a == value_b
            }
            _ => false,
        };
        pass &= equal;
        rows.push(ComparisonRow {
            layer_a: a.map(|(n, _)| n.clone()),
            value_a: a.map(|(_, v)| v.clone()),
            layer_b: b.map(|(n, _)| n.clone()),
            value_b: b.map(|(_, v)| v.clone()),
            equal,
        });
    }
    Ok(SuffixComparison {
        from_layer: from_layer.to_string(),
        pass,
        rows,
    })
}

/// Check that per-layer output shapes from `from_layer` onward are
/// identical between two networks, each evaluated at its own input size.
pub fn verify_shape_preservation(
    net_a: &NetworkSpec,
    input_a: [usize; 3],
    net_b: &NetworkSpec,
    input_b: [usize; 3],
    from_layer: &str,
) -> Result<SuffixComparison<Vec<usize>>> {
    let rows_a = infer_shapes(net_a, input_a)?;
    let rows_b = infer_shapes(net_b, input_b)?;
    compare_suffixes(
        &rows_a,
        &rows_b,
        from_layer,
        net_a.position(from_layer),
        net_b.position(from_layer),
    )
}

/// Check that per-layer multiply-accumulate counts from `from_layer`
/// onward are identical between two networks.
pub fn verify_flops_preservation(
    net_a: &NetworkSpec,
    input_a: [usize; 3],
    net_b: &NetworkSpec,
    input_b: [usize; 3],
    from_layer: &str,
) -> Result<SuffixComparison<u64>> {
    let report_a = count_flops(net_a, input_a)?;
    let report_b = count_flops(net_b, input_b)?;
    let rows_a: Vec<(String, u64)> = report_a
        .per_layer
        .iter()
        .map(|c| (c.name.clone(), c.macs))
        .collect();
    let rows_b: Vec<(String, u64)> = report_b
        .per_layer
        .iter()
        .map(|c| (c.name.clone(), c.macs))
        .collect();
    compare_suffixes(
        &rows_a,
        &rows_b,
        from_layer,
        net_a.position(from_layer),
        net_b.position(from_layer),
    )
}

/// Effective kernel extent of a recorded convolution split: `k1 + k2 - 1`,
/// cross-checked against the layers actually present in the network and
/// required to cover the original kernel (with equality when the split
/// introduced no zero padding of the target).
pub fn verify_effective_kernel(net: &NetworkSpec, record: &MorphRecord) -> Result<usize> {
    let (inserted, original_kernel, k1, k2) = match record {
        MorphRecord::SplitConv {
            inserted,
            original_kernel,
            k1,
            k2,
            ..
        } => (inserted, *original_kernel, *k1, *k2),
        other => {
            return Err(Error::Verify(format!(
                "effective-kernel check needs a split record, got {}",
                other.kind_str()
            )));
        }
    };
    let kernel_of = |name: &str| -> Result<usize> {
        let node = net
            .find_layer(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        match node.kind {
            LayerKind::Conv2d { kernel_size, .. } => Ok(kernel_size),
            ref other => Err(Error::Verify(format!(
                "recorded split layer '{name}' is a {} layer, not a convolution",
                other.kind_str()
            ))),
        }
    };
    let ka = kernel_of(&inserted[0])?;
    let kb = kernel_of(&inserted[3])?;
    if ka != k1 || kb != k2 {
        return Err(Error::Verify(format!(
            "network kernels ({ka}, {kb}) no longer match the recorded split ({k1}, {k2})"
        )));
    }
    let ke = k1 + k2 - 1;
    if ke < original_kernel {
        return Err(Error::Verify(format!(
            "effective kernel {ke} cannot cover the recorded original {original_kernel}"
        )));
    }
    Ok(ke)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_axis_matches_brute_force() {
        // Every (kernel, stride, padding, extent) small case: an output
        // position is clean iff its window lies inside the clean interval.
        for extent in 1..10i64 {
            for kernel in 1..4usize {
                for stride in 1..3usize {
                    for padding in 0..3usize {
                        let padded = extent + 2 * padding as i64;
                        if padded < kernel as i64 {
                            continue;
                        }
                        let out_extent =
                            ((padded - kernel as i64) / stride as i64 + 1) as usize;
                        for lo in 0..extent {
                            for hi in lo..=extent {
                                let (flo, fhi) =
                                    fold_axis((lo, hi), kernel, stride, padding, out_extent);
                                for o in 0..out_extent as i64 {
                                    let start = o * stride as i64 - padding as i64;
                                    let end = start + kernel as i64;
                                    let clean = start >= lo && end <= hi;
                                    let kept = o >= flo && o < fhi;
                                    assert_eq!(
                                        clean, kept,
                                        "k={kernel} s={stride} p={padding} interval=({lo},{hi}) \
                                         output {o}: clean={clean} kept={kept}"
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_intervals_stay_empty() {
        let folded = fold_axis((3, 3), 3, 1, 1, 10);
        assert_eq!(folded, (0, 0), "an empty interval must fold to empty");
    }
}
