//! Dense tensors, sparse segment kernels and the differentiation tape.

mod adam;
mod segment;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use segment::{segment_softmax, uniform_weights, SegmentIndex};
pub use tape::{BatchStats, Gradients, RowLayout, Tape, Var};
pub use tensor::Tensor;
