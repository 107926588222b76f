//! Minimal CPU tensor engine with reverse-mode autodiff.
//!
//! Images are NHWC `f32` tensors. Convolutions run as im2col + SGEMM over
//! fixed-size image chunks; with the `parallel` feature the chunks are spread
//! over rayon, otherwise they run in order on the calling thread. Either way
//! the results are bit-identical.

pub mod gemm;
pub mod graph;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use init::Init;
pub use params::{Binder, EntryKind, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("malformed parameter container: {0}")]
    Format(String),
}
