//! Small reverse-mode tensor runtime.
//!
//! Enough machinery to train convolutional and transformer classifiers on a
//! CPU: dense row-major [`Tensor`]s, a define-by-run [`Graph`] with
//! hand-written backward rules, named [`ParamStore`]s, [`Adam`], and
//! safetensors [`archive`] I/O. Everything is generic over [`Scalar`] so the
//! same model code runs in `f32` for training and `f64` for gradient checks.

pub mod archive;
mod conv;
mod error;
mod graph;
pub mod init;
mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use conv::Conv2dGeometry;
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use ops::softmax_in_place;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::{Float, Scalar};
pub use tensor::Tensor;
