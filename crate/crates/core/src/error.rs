use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by parsing, shape checking, rewriting and verification.
#[derive(Debug, Error)]
pub enum Error {
    /// A network document violates the schema; `path` names the offending
    /// field (e.g. `layers[3].kernel_size`).
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    /// Two layers (possibly nested inside residual blocks) share a name.
    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),

    /// A layer was asked for by name but does not exist.
    #[error("no layer named `{0}`")]
    UnknownLayer(String),

    /// A layer's declared input channels disagree with the incoming tensor.
    #[error("channel mismatch at layer `{layer}`: layer expects {expected} input channels, got {got}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },

    /// Shape inference failed (non-positive spatial dimension, wrong rank,
    /// mismatched residual branches, ...).
    #[error("shape error at layer `{layer}`: {message}")]
    Shape { layer: String, message: String },

    /// A tensor-level precondition failed (rank, dimension or length).
    #[error("tensor error: {0}")]
    Tensor(String),

    /// A named parameter is missing from the store or has the wrong shape.
    #[error("parameter `{name}`: {message}")]
    Param { name: String, message: String },

    /// The capacity condition for splitting a convolution does not hold:
    /// the larger factor must have at least as many coefficients as the
    /// composed target kernel.
    #[error(
        "split not expressible: max(c_mid*c_in*k1^2, c_out*c_mid*k2^2) = max({lhs_first}, {lhs_second}) < c_out*c_in*(k1+k2-1)^2 = {rhs}"
    )]
    ConditionFailed {
        lhs_first: u64,
        lhs_second: u64,
        rhs: u64,
    },

    /// A rewrite precondition failed (wrong layer kind, malformed stem, ...).
    #[error("rewrite error: {0}")]
    Rewrite(String),

    /// The factorization solver stopped above tolerance, so the rewrite was
    /// aborted and the inputs left untouched.
    #[error(
        "factorization did not converge: relative residual {residual:.3e} > tolerance {tol:.3e} after {iterations} iterations"
    )]
    SolverDidNotConverge {
        residual: f64,
        tol: f64,
        iterations: usize,
    },

    /// A verification request was malformed (incomparable nets, empty
    /// interior region, unknown compare point, ...).
    #[error("verification error: {0}")]
    Verify(String),

    /// The weights container is malformed (bad magic, overlapping ranges,
    /// truncated blob, dtype mismatch, ...).
    #[error("weights container: {0}")]
    Container(String),

    /// Loss inputs are malformed (empty batch, shape mismatch, zero count).
    #[error("loss error: {0}")]
    Loss(String),

    /// A class label lies outside `0..classes`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
