//! Function-preserving network rewrites.
//!
//! A *morph* replaces part of a network with a differently-shaped part that
//! computes the same function, so that training can continue from the same
//! point in function space. This module provides:
//!
//! - [`check_morph_condition`]: the parameter-count inequality that decides
//!   whether a convolution kernel can be factored exactly into two kernels;
//! - [`solve_kernel_factorization`]: the alternating-least-squares solver
//!   that actually produces the two factors;
//! - [`make_identity_batchnorm`] / [`make_identity_prelu`]: layer parameters
//!   that are exact identities at inference time, used to pre-insert
//!   trainable structure without disturbing the function;
//! - [`split_conv`]: replace one convolution with an equivalent
//!   conv → batch-norm → PReLU → conv chain;
//! - [`promote_resolution`]: double the network's input resolution while
//!   keeping every downstream layer's shapes and compute unchanged;
//! - [`MorphRecord`]: the provenance entry each rewrite appends to the
//!   network metadata.

mod rewrite;
mod solver;

pub use rewrite::{
    insert_identity_batchnorm, insert_identity_prelu, promote_resolution, split_conv,
};
pub use solver::{solve_kernel_factorization, FactorizationResult, SolverOptions};

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationParams, BatchNormParams};
use crate::error::{Error, Result};
use crate::ir::NetworkSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The evaluated morphability inequality for splitting a convolution of
/// `c_in → c_out` channels into factors with kernel sizes `k1`, `k2` and
/// `c_mid` intermediate channels.
///
/// The composed kernel spans `k1 + k2 - 1` taps per axis, so the target of
/// the factorization has `c_out * c_in * (k1 + k2 - 1)^2` coefficients. The
/// split can reproduce an arbitrary such target exactly when at least one
/// factor alone carries that many degrees of freedom:
///
/// ```text
/// max(c_mid * c_in * k1^2,  c_out * c_mid * k2^2)  >=  c_out * c_in * (k1 + k2 - 1)^2
/// ```
///
/// The inequality is exactly the requirement that the larger factor's linear
/// map onto composed kernels is (generically) surjective, which is what the
/// solver relies on to reach machine-precision residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MorphCondition {
    /// `c_mid * c_in * k1^2`: coefficients in the first factor.
    pub lhs_first: u64,
    /// `c_out * c_mid * k2^2`: coefficients in the second factor.
    pub lhs_second: u64,
    /// `c_out * c_in * (k1 + k2 - 1)^2`: coefficients in the composed target.
    pub rhs: u64,
    /// Whether `max(lhs_first, lhs_second) >= rhs`.
    pub holds: bool,
}

impl MorphCondition {
    /// Error out with the evaluated numbers when the inequality fails.
    pub fn require(&self) -> Result<()> {
        if self.holds {
            Ok(())
        } else {
            Err(Error::ConditionFailed {
                lhs_first: self.lhs_first,
                lhs_second: self.lhs_second,
                rhs: self.rhs,
            })
        }
    }
}

/// Evaluate the morphability inequality. All arguments must be positive.
pub fn check_morph_condition(
    c_in: usize,
    c_out: usize,
    c_mid: usize,
    k1: usize,
    k2: usize,
) -> Result<MorphCondition> {
    for (name, value) in [
        ("c_in", c_in),
        ("c_out", c_out),
        ("c_mid", c_mid),
        ("k1", k1),
        ("k2", k2),
    ] {
        if value == 0 {
            return Err(Error::Param {
                name: name.into(),
                message: "must be positive".into(),
            });
        }
    }
    let ke = (k1 + k2 - 1) as u64;
    let lhs_first = (c_mid * c_in) as u64 * (k1 * k1) as u64;
    let lhs_second = (c_out * c_mid) as u64 * (k2 * k2) as u64;
    let rhs = (c_out * c_in) as u64 * ke * ke;
    Ok(MorphCondition {
        lhs_first,
        lhs_second,
        rhs,
        holds: lhs_first.max(lhs_second) >= rhs,
    })
}

/// Batch-normalisation parameters that are an exact identity at inference.
///
/// With `gamma = 1`, `beta = 0`, `mean = 0` and `var = 1 - epsilon`, the
/// normaliser computes `x / sqrt((1 - epsilon) + epsilon) = x`. The variance
/// entries are produced by subtracting in the target precision, so
/// `var + epsilon` re-rounds to exactly `1.0` in that precision: both
/// rounding errors are below half an ulp of `1.0` whenever
/// `0 < epsilon < 0.5`, which this constructor requires.
pub fn make_identity_batchnorm<T: Scalar>(
    channels: usize,
    epsilon: f64,
) -> Result<BatchNormParams<T>> {
    if channels == 0 {
        return Err(Error::Param {
            name: "channels".into(),
            message: "must be positive".into(),
        });
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Param {
            name: "epsilon".into(),
            message: format!("must lie in (0, 0.5) for an exact identity, got {epsilon}"),
        });
    }
    let var = T::one() - T::from_f64(epsilon);
    Ok(BatchNormParams {
        gamma: Tensor::full(vec![channels], T::one()),
        beta: Tensor::zeros(vec![channels]),
        mean: Tensor::zeros(vec![channels]),
        var: Tensor::full(vec![channels], var),
        epsilon,
    })
}

/// PReLU parameters that are an exact identity: slope 1 on the negative
/// side makes the activation the identity function everywhere.
pub fn make_identity_prelu() -> ActivationParams {
    ActivationParams { slope: 1.0 }
}

/// Provenance entry for one rewrite, appended to the network metadata.
///
/// Records use a logical sequence number rather than wall-clock time so
/// that rewritten files are bit-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MorphRecord {
    /// One convolution replaced by a conv → BN → PReLU → conv chain.
    SplitConv {
        seq: u64,
        /// Name of the convolution that was replaced.
        source: String,
        /// The four inserted layer names, in network order.
        inserted: Vec<String>,
        /// Kernel size of the replaced convolution.
        original_kernel: usize,
        /// Kernel size of the first factor.
        k1: usize,
        /// Kernel size of the second factor.
        k2: usize,
        /// Intermediate channel count.
        c_mid: usize,
        /// Relative Frobenius residual of the kernel factorization.
        residual: f64,
        /// Alternating-least-squares iterations used.
        iterations: usize,
    },
    /// Input resolution doubled; the front convolution re-strided and a
    /// 2x2 max-pool inserted behind it.
    PromoteResolution {
        seq: u64,
        /// Name of the front convolution whose stride was changed.
        source: String,
        /// The inserted layer names (the pooling layer).
        inserted: Vec<String>,
        /// Kernel-space residual attributable to this rewrite. The
        /// promotion itself moves no weights, so this is zero; an internal
        /// split performed to prepare the front carries its own record.
        residual: f64,
        input_before: [usize; 3],
        input_after: [usize; 3],
    },
}

impl MorphRecord {
    pub fn seq(&self) -> u64 {
        match self {
            MorphRecord::SplitConv { seq, .. } => *seq,
            MorphRecord::PromoteResolution { seq, .. } => *seq,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            MorphRecord::SplitConv { .. } => "split-conv",
            MorphRecord::PromoteResolution { .. } => "promote-resolution",
        }
    }

    pub fn source(&self) -> &str {
        match self {
            MorphRecord::SplitConv { source, .. } => source,
            MorphRecord::PromoteResolution { source, .. } => source,
        }
    }

    pub fn inserted(&self) -> &[String] {
        match self {
            MorphRecord::SplitConv { inserted, .. } => inserted,
            MorphRecord::PromoteResolution { inserted, .. } => inserted,
        }
    }

    pub fn residual(&self) -> f64 {
        match self {
            MorphRecord::SplitConv { residual, .. } => *residual,
            MorphRecord::PromoteResolution { residual, .. } => *residual,
        }
    }

    fn metadata_key(&self) -> String {
        format!("morph.{:04}", self.seq())
    }
}

/// Parse the rewrite history out of a network's metadata, in order.
pub fn morph_records(net: &NetworkSpec) -> Result<Vec<MorphRecord>> {
    let mut records = Vec::new();
    for (key, value) in &net.metadata {
        if !key.starts_with("morph.") {
            continue;
        }
        let record: MorphRecord = serde_json::from_str(value).map_err(|e| Error::Schema {
            path: format!("metadata.{key}"),
            message: format!("not a valid rewrite record: {e}"),
        })?;
        records.push(record);
    }
    records.sort_by_key(MorphRecord::seq);
    Ok(records)
}

/// The sequence number the next rewrite of `net` should use.
pub fn next_seq(net: &NetworkSpec) -> Result<u64> {
    let records = morph_records(net)?;
    Ok(records.iter().map(MorphRecord::seq).max().map_or(0, |s| s + 1))
}

/// Append one rewrite record to the network metadata.
pub fn append_record(net: &mut NetworkSpec, record: &MorphRecord) -> Result<()> {
    let key = record.metadata_key();
    if net.metadata.contains_key(&key) {
        return Err(Error::Rewrite(format!(
            "rewrite record {key} already present; sequence numbers must be fresh"
        )));
    }
    let value = serde_json::to_string(record)?;
    net.metadata.insert(key, value);
    Ok(())
}
