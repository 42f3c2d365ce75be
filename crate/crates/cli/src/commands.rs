//! The subcommand implementations.
//!
//! Every command reads its inputs, writes any output files, prints one JSON
//! report to standard output and returns the process exit code: `0` for
//! success (for `verify`, a passing check), `1` for a failing check.
//! Operational errors bubble up as [`convmorph::Error`] and are mapped to
//! exit code `1` by `main`; bad flags are rejected by the parser with exit
//! code `2`. Input files are never modified.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use convmorph::ir::{
    count_flops, infer_shapes, receptive_field, FlopsReport, LayerKind, NetworkSpec,
};
use convmorph::loss::{
    class_weights, wce_gradient, weighted_cross_entropy, LossBatch, Reduction,
};
use convmorph::morph::{
    check_morph_condition, promote_resolution, split_conv, MorphCondition, MorphRecord,
};
use convmorph::templates::{build, init_weights, Template};
use convmorph::verify::{
    verify_flops_preservation, verify_function_preservation, verify_shape_preservation,
    LayerShape, PreservationReport, SuffixComparison, VerifyMode, VerifyOptions,
};
use convmorph::{DType, Error, Result, Scalar, Tensor};

use crate::csvio;
use crate::model::{solver_options, ModelPaths, SolverFlags};

fn parse_dtype(raw: &str) -> Result<DType> {
    match raw {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Param {
            name: "dtype".to_string(),
            message: format!("unknown element type `{other}` (expected f32 or f64)"),
        }),
    }
}

fn to_json<T: Serialize>(report: &T) -> String {
    serde_json::to_string_pretty(report).expect("reports are plain trees of data")
}

/// Write the report to standard output. A consumer that stops reading
/// early (a closed pipe) truncates the report but never aborts the
/// command: file outputs and the exit code still stand.
fn print_report<T: Serialize>(report: &T) -> Result<()> {
    match writeln!(io::stdout().lock(), "{}", to_json(report)) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

/// Print the report and, when requested, also write it to a file.
fn emit_report<T: Serialize>(report: &T, file: Option<&Path>) -> Result<()> {
    print_report(report)?;
    if let Some(path) = file {
        std::fs::write(path, to_json(report) + "\n")?;
    }
    Ok(())
}

fn shape_rows(net: &NetworkSpec, input: [usize; 3]) -> Result<Vec<LayerShape>> {
    Ok(infer_shapes(net, input)?
        .into_iter()
        .map(|(layer, shape)| LayerShape { layer, shape })
        .collect())
}

// ---------------------------------------------------------------------------
// init

#[derive(Debug, clap::Args)]
pub struct InitArgs {
    /// Architecture to generate (`resnet18-like` or `tiny-conv`).
    #[arg(long)]
    pub template: String,

    /// Number of output classes.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,

    /// Seed for the weight initialisation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Element type of the stored weights (`f32` or `f64`).
    #[arg(long, default_value = "f32")]
    pub dtype: String,

    /// Output model basename (writes `<out>.json` and `<out>.weights`).
    #[arg(long)]
    pub out: String,
}

#[derive(Serialize)]
struct InitReport {
    command: &'static str,
    template: &'static str,
    classes: usize,
    seed: u64,
    dtype: &'static str,
    spec: String,
    weights: String,
    layers: usize,
    parameters: usize,
}

fn init_typed<T: Scalar>(net: &NetworkSpec, seed: u64, paths: &ModelPaths) -> Result<usize> {
    let store = init_weights::<T>(net, seed)?;
    paths.save(net, &store)?;
    Ok(store.iter().map(|(_, t)| t.data().len()).sum())
}

pub fn run_init(args: &InitArgs) -> Result<i32> {
    let template = Template::from_name(&args.template)?;
    let dtype = parse_dtype(&args.dtype)?;
    let mut net = build(template, args.classes)?;
    net.metadata
        .insert("init.template".to_string(), template.as_str().to_string());
    net.metadata
        .insert("init.classes".to_string(), args.classes.to_string());
    net.metadata
        .insert("init.seed".to_string(), args.seed.to_string());

    let paths = ModelPaths::resolve(&args.out);
    let parameters = match dtype {
        DType::F32 => init_typed::<f32>(&net, args.seed, &paths)?,
        DType::F64 => init_typed::<f64>(&net, args.seed, &paths)?,
    };

    print_report(&InitReport {
        command: "init",
        template: template.as_str(),
        classes: args.classes,
        seed: args.seed,
        dtype: dtype.as_str(),
        spec: paths.spec.display().to_string(),
        weights: paths.weights.display().to_string(),
        layers: net.layers.len(),
        parameters,
    })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// morph-split

#[derive(Debug, clap::Args)]
pub struct SplitArgs {
    /// Input model basename.
    #[arg(long)]
    pub model: String,

    /// Output model basename.
    #[arg(long)]
    pub out: String,

    /// Name of the convolution layer to split.
    #[arg(long)]
    pub layer: String,

    /// Kernel size of the first factor.
    #[arg(long)]
    pub k1: usize,

    /// Kernel size of the second factor.
    #[arg(long)]
    pub k2: usize,

    /// Intermediate channel count (defaults to the layer's output channels).
    #[arg(long)]
    pub cl: Option<usize>,

    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Serialize)]
struct SplitReport {
    command: &'static str,
    model: String,
    out: String,
    dtype: &'static str,
    condition: MorphCondition,
    record: MorphRecord,
}

fn split_typed<T: Scalar>(
    net: &NetworkSpec,
    input: &ModelPaths,
    out: &ModelPaths,
    args: &SplitArgs,
) -> Result<MorphRecord> {
    let opts = solver_options(net, &args.solver)?;
    let store = input.load_store::<T>()?;
    let (new_net, new_store, record) =
        split_conv(net, &store, &args.layer, args.k1, args.k2, args.cl, &opts)?;
    out.save(&new_net, &new_store)?;
    Ok(record)
}

pub fn run_split(args: &SplitArgs) -> Result<i32> {
    let input = ModelPaths::resolve(&args.model);
    let out = ModelPaths::resolve(&args.out);
    let net = input.load_spec()?;

    let (c_in, c_out) = match net.find_layer(&args.layer).map(|l| &l.kind) {
        Some(LayerKind::Conv2d {
            in_channels,
            out_channels,
            ..
        }) => (*in_channels, *out_channels),
        Some(other) => {
            return Err(Error::Rewrite(format!(
                "layer '{}' is a {} layer; only convolutions can be split",
                args.layer,
                other.kind_str()
            )));
        }
        None => return Err(Error::UnknownLayer(args.layer.clone())),
    };
    let c_mid = args.cl.unwrap_or(c_out);
    let condition = check_morph_condition(c_in, c_out, c_mid, args.k1, args.k2)?;

    let dtype = input.dtype()?;
    let record = match dtype {
        DType::F32 => split_typed::<f32>(&net, &input, &out, args)?,
        DType::F64 => split_typed::<f64>(&net, &input, &out, args)?,
    };

    print_report(&SplitReport {
        command: "morph-split",
        model: args.model.clone(),
        out: args.out.clone(),
        dtype: dtype.as_str(),
        condition,
        record,
    })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// morph-promote

#[derive(Debug, clap::Args)]
pub struct PromoteArgs {
    /// Input model basename.
    #[arg(long)]
    pub model: String,

    /// Output model basename.
    #[arg(long)]
    pub out: String,

    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Serialize)]
struct PromoteReport {
    command: &'static str,
    model: String,
    out: String,
    dtype: &'static str,
    input_before: [usize; 3],
    input_after: [usize; 3],
    records: Vec<MorphRecord>,
    shapes_before: Vec<LayerShape>,
    shapes_after: Vec<LayerShape>,
}

fn promote_typed<T: Scalar>(
    net: &NetworkSpec,
    input: &ModelPaths,
    out: &ModelPaths,
    flags: &SolverFlags,
) -> Result<(NetworkSpec, Vec<MorphRecord>)> {
    let opts = solver_options(net, flags)?;
    let store = input.load_store::<T>()?;
    let (new_net, new_store, records) = promote_resolution(net, &store, &opts)?;
    out.save(&new_net, &new_store)?;
    Ok((new_net, records))
}

pub fn run_promote(args: &PromoteArgs) -> Result<i32> {
    let input = ModelPaths::resolve(&args.model);
    let out = ModelPaths::resolve(&args.out);
    let net = input.load_spec()?;
    let dtype = input.dtype()?;
    let (new_net, records) = match dtype {
        DType::F32 => promote_typed::<f32>(&net, &input, &out, &args.solver)?,
        DType::F64 => promote_typed::<f64>(&net, &input, &out, &args.solver)?,
    };

    print_report(&PromoteReport {
        command: "morph-promote",
        model: args.model.clone(),
        out: args.out.clone(),
        dtype: dtype.as_str(),
        input_before: net.input_shape,
        input_after: new_net.input_shape,
        records,
        shapes_before: shape_rows(&net, net.input_shape)?,
        shapes_after: shape_rows(&new_net, new_net.input_shape)?,
    })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify

#[derive(Debug, clap::Args)]
pub struct VerifyArgs {
    /// First model basename (the reference).
    #[arg(long = "model-a")]
    pub model_a: String,

    /// Second model basename (the candidate).
    #[arg(long = "model-b")]
    pub model_b: String,

    /// Number of random probe inputs for the function check.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,

    /// Seed for the probe inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Absolute tolerance (defaults to 1e-4 for f32 weights, 1e-8 for f64).
    #[arg(long)]
    pub tol: Option<f64>,

    /// Optional relative tolerance; a check may also pass by closeness.
    #[arg(long = "tol-rel")]
    pub tol_rel: Option<f64>,

    /// `exact-interior` (padding-free region only) or `statistical`
    /// (full feature maps, borders included).
    #[arg(long, default_value = "exact-interior")]
    pub mode: String,

    /// Compare per-layer shapes and MACs from this layer onward, each
    /// model at its own declared input size, instead of running the
    /// networks. Used after a resolution promotion.
    #[arg(long = "from-layer")]
    pub from_layer: Option<String>,

    /// Also write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct StructureVerifyReport {
    command: &'static str,
    check: &'static str,
    model_a: String,
    model_b: String,
    from_layer: String,
    input_a: [usize; 3],
    input_b: [usize; 3],
    shapes: SuffixComparison<Vec<usize>>,
    macs: SuffixComparison<u64>,
    pass: bool,
}

#[derive(Serialize)]
struct FunctionVerifyReport {
    command: &'static str,
    check: &'static str,
    model_a: String,
    model_b: String,
    dtype: &'static str,
    report: PreservationReport,
}

fn function_typed<T: Scalar>(
    net_a: &NetworkSpec,
    net_b: &NetworkSpec,
    a: &ModelPaths,
    b: &ModelPaths,
    opts: &VerifyOptions,
) -> Result<PreservationReport> {
    let store_a = a.load_store::<T>()?;
    let store_b = b.load_store::<T>()?;
    verify_function_preservation(net_a, &store_a, net_b, &store_b, opts)
}

pub fn run_verify(args: &VerifyArgs) -> Result<i32> {
    let a = ModelPaths::resolve(&args.model_a);
    let b = ModelPaths::resolve(&args.model_b);
    let net_a = a.load_spec()?;
    let net_b = b.load_spec()?;

    if let Some(from_layer) = &args.from_layer {
        let shapes = verify_shape_preservation(
            &net_a,
            net_a.input_shape,
            &net_b,
            net_b.input_shape,
            from_layer,
        )?;
        let macs = verify_flops_preservation(
            &net_a,
            net_a.input_shape,
            &net_b,
            net_b.input_shape,
            from_layer,
        )?;
        let pass = shapes.pass && macs.pass;
        let report = StructureVerifyReport {
            command: "verify",
            check: "structure",
            model_a: args.model_a.clone(),
            model_b: args.model_b.clone(),
            from_layer: from_layer.clone(),
            input_a: net_a.input_shape,
            input_b: net_b.input_shape,
            shapes,
            macs,
            pass,
        };
        emit_report(&report, args.report.as_deref())?;
        return Ok(if pass { 0 } else { 1 });
    }

    let dtype_a = a.dtype()?;
    let dtype_b = b.dtype()?;
    if dtype_a != dtype_b {
        return Err(Error::Param {
            name: "model-b".to_string(),
            message: format!(
                "weights are {dtype_b} but the first model's are {dtype_a}; \
                 function comparison needs a single element type"
            ),
        });
    }
    let opts = VerifyOptions {
        mode: VerifyMode::from_name(&args.mode)?,
        samples: args.samples,
        seed: args.seed,
        tol_abs: args.tol,
        tol_rel: args.tol_rel,
        compare_at: None,
        input_shape: None,
    };
    let inner = match dtype_a {
        DType::F32 => function_typed::<f32>(&net_a, &net_b, &a, &b, &opts)?,
        DType::F64 => function_typed::<f64>(&net_a, &net_b, &a, &b, &opts)?,
    };
    let pass = inner.pass;
    let report = FunctionVerifyReport {
        command: "verify",
        check: "function",
        model_a: args.model_a.clone(),
        model_b: args.model_b.clone(),
        dtype: dtype_a.as_str(),
        report: inner,
    };
    emit_report(&report, args.report.as_deref())?;
    Ok(if pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug, clap::Args)]
pub struct AnalyzeArgs {
    /// Model basename.
    #[arg(long)]
    pub model: String,

    /// Evaluate at `S`×`S` input instead of the declared resolution
    /// (channel count keeps the declared value).
    #[arg(long = "input-size")]
    pub input_size: Option<usize>,
}

#[derive(Serialize)]
struct ReceptiveFieldRow {
    layer: String,
    size: u64,
    jump: u64,
    offset: f64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    command: &'static str,
    model: String,
    input_shape: [usize; 3],
    flops: FlopsReport,
    receptive_fields: Vec<ReceptiveFieldRow>,
}

pub fn run_analyze(args: &AnalyzeArgs) -> Result<i32> {
    let paths = ModelPaths::resolve(&args.model);
    let net = paths.load_spec()?;
    let input_shape = match args.input_size {
        None => net.input_shape,
        Some(0) => {
            return Err(Error::Param {
                name: "input-size".to_string(),
                message: "must be positive".to_string(),
            });
        }
        Some(s) => [net.input_shape[0], s, s],
    };
    let flops = count_flops(&net, input_shape)?;

    // Receptive fields are defined over the convolutional prefix; stop at
    // the first layer that collapses the spatial axes.
    let mut receptive_fields = Vec::new();
    for layer in &net.layers {
        if matches!(
            layer.kind,
            LayerKind::GlobalAvgPool | LayerKind::Linear { .. }
        ) {
            break;
        }
        let state = receptive_field(&net, &layer.name)?;
        receptive_fields.push(ReceptiveFieldRow {
            layer: layer.name.clone(),
            size: state.size,
            jump: state.jump,
            offset: state.offset(),
        });
    }

    print_report(&AnalyzeReport {
        command: "analyze",
        model: args.model.clone(),
        input_shape,
        flops,
        receptive_fields,
    })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// loss

#[derive(Debug, clap::Args)]
pub struct LossArgs {
    /// Logits CSV: header row, then one sample per row.
    #[arg(long)]
    pub logits: PathBuf,

    /// Labels CSV: header row, then one class index per row.
    #[arg(long)]
    pub labels: PathBuf,

    /// Comma-separated class counts for the inverse-frequency weights
    /// (defaults to balanced classes, i.e. uniform weights).
    #[arg(long)]
    pub counts: Option<String>,

    /// Aggregation: `mean` (weight-normalised) or `sum`.
    #[arg(long, default_value = "mean")]
    pub reduction: String,

    /// Write the per-sample gradient to this CSV file.
    #[arg(long = "grad-out")]
    pub grad_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct LossReport {
    command: &'static str,
    samples: usize,
    classes: usize,
    reduction: &'static str,
    weights: Vec<f64>,
    loss: f64,
    grad_out: Option<String>,
}

pub fn run_loss(args: &LossArgs) -> Result<i32> {
    let (values, classes) = csvio::read_float_table(&args.logits)?;
    let labels = csvio::read_label_column(&args.labels)?;
    let samples = values.len() / classes;
    if labels.len() != samples {
        return Err(Error::Param {
            name: "labels".to_string(),
            message: format!("{} labels for {} logit rows", labels.len(), samples),
        });
    }
    let batch = LossBatch::new(Tensor::new(vec![samples, classes], values)?, labels)?;

    let counts = match &args.counts {
        Some(raw) => csvio::parse_count_list(raw)?,
        None => vec![1; classes],
    };
    let weights = class_weights(&counts)?;

    let (reduction, reduction_name) = match args.reduction.as_str() {
        "mean" => (Reduction::Mean, "mean"),
        "sum" => (Reduction::Sum, "sum"),
        other => {
            return Err(Error::Param {
                name: "reduction".to_string(),
                message: format!("unknown reduction `{other}` (expected mean or sum)"),
            });
        }
    };
    let loss = weighted_cross_entropy(&batch, &weights, reduction)?;

    let grad_out = match &args.grad_out {
        Some(path) => {
            let grad = wce_gradient(&batch, &weights)?;
            csvio::write_float_table(path, "grad", grad.data(), classes)?;
            Some(path.display().to_string())
        }
        None => None,
    };

    print_report(&LossReport {
        command: "loss",
        samples,
        classes,
        reduction: reduction_name,
        weights: weights.as_slice().to_vec(),
        loss,
        grad_out,
    })?;
    Ok(0)
}
