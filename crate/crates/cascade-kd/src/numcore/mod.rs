//! Minimal reverse-mode differentiable kernel: tensors, a tape graph, the
//! losses used by the trainers, and Adam.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use tensor::{
    clamped_neg_log, cross_entropy_eval, dense_eval, relu_eval, softmax_eval, Tensor, PROB_CLAMP,
};

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("tensor data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("backward called twice on the same graph")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("optimizer bound to {expected} parameters, step received {got}")]
    OptimizerParamCount { expected: usize, got: usize },
    #[error("optimizer moment buffer {index} has {expected} entries, parameter has {got}")]
    OptimizerShape {
        index: usize,
        expected: usize,
        got: usize,
    },
}

/// Splits a base seed into independent named streams. FNV-1a over the tag,
/// mixed with the base via splitmix64, so derived seeds are stable across
/// platforms.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
