//! Receptive-field arithmetic over convolutional prefixes.

use serde::Serialize;

use crate::ir::{LayerKind, NetworkSpec};
use crate::{Error, Result};

/// Receptive-field description of one activation relative to the network
/// input: `size` is the edge length of the input patch one output element
/// sees, `jump` the input-pixel distance between horizontally adjacent
/// output elements, and `offset` the (possibly half-integer) position of
/// the first output element's patch centre.
///
/// The fold starts from `size = 1, jump = 1, offset = 0` and absorbs a
/// window of size `k`, stride `s`, padding `p` as
///
/// ```text
/// size'   = size + (k - 1) * jump
/// offset' = offset + ((k - 1) / 2 - p) * jump
/// jump'   = jump * s
/// ```
///
/// `(k - 1) / 2` can be a half-integer, so the offset is stored exactly as
/// a count of half-pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReceptiveFieldState {
    pub size: u64,
    pub jump: u64,
    /// Offset of the first element's patch centre, in half-pixels.
    pub offset_halves: i64,
}

impl ReceptiveFieldState {
    /// State of the raw input itself.
    pub fn identity() -> Self {
        ReceptiveFieldState {
            size: 1,
            jump: 1,
            offset_halves: 0,
        }
    }

    /// Offset in pixels (exact halves widen losslessly into `f64`).
    pub fn offset(&self) -> f64 {
        self.offset_halves as f64 / 2.0
    }

    /// Absorb one sliding window of size `k`, stride `s`, padding `p`.
    pub fn after_window(self, k: usize, s: usize, p: usize) -> Self {
        ReceptiveFieldState {
            size: self.size + (k as u64 - 1) * self.jump,
            jump: self.jump * s as u64,
            offset_halves: self.offset_halves + (k as i64 - 1 - 2 * p as i64) * self.jump as i64,
        }
    }

    /// Combine with the state of a suffix chain that was folded on its own
    /// (starting from [`ReceptiveFieldState::identity`]). Folding `A ++ B`
    /// in one go equals `fold(A).compose(fold(B))`.
    pub fn compose(self, suffix: Self) -> Self {
        ReceptiveFieldState {
            size: self.size + (suffix.size - 1) * self.jump,
            jump: self.jump * suffix.jump,
            offset_halves: self.offset_halves + self.jump as i64 * suffix.offset_halves,
        }
    }
}

fn fold_kind(state: ReceptiveFieldState, kind: &LayerKind, layer: &str) -> Result<ReceptiveFieldState> {
    match kind {
        LayerKind::Conv2d {
            kernel_size,
            stride,
            padding,
            ..
        } => Ok(state.after_window(*kernel_size, *stride, *padding)),
        LayerKind::MaxPool2d {
            kernel_size,
            stride,
        } => Ok(state.after_window(*kernel_size, *stride, 0)),
        LayerKind::BatchNorm2d { .. } | LayerKind::Activation { .. } => Ok(state),
        LayerKind::ResidualBlock { main, .. } => {
            // Blocks are folded along their main path; the shortcut only
            // ever sees a subset of the same input patch.
            let mut s = state;
            for sub in main {
                s = fold_kind(s, &sub.kind, &sub.name)?;
            }
            Ok(s)
        }
        LayerKind::GlobalAvgPool | LayerKind::Linear { .. } => Err(Error::Verify(format!(
            "receptive field is only defined over convolutional prefixes; hit {} layer `{}`",
            kind.kind_str(),
            layer
        ))),
    }
}

/// Fold the receptive-field recurrence over the prefix of top-level layers
/// up to and including `upto_layer`.
pub fn receptive_field(net: &NetworkSpec, upto_layer: &str) -> Result<ReceptiveFieldState> {
    let end = net
        .position(upto_layer)
        .ok_or_else(|| Error::UnknownLayer(upto_layer.to_string()))?;
    let mut state = ReceptiveFieldState::identity();
    for layer in &net.layers[..=end] {
        state = fold_kind(state, &layer.kind, &layer.name)?;
    }
    Ok(state)
}
