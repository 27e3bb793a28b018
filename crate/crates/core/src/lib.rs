//! Hessian-trace-guided mixed-precision quantization for small dense networks.
//!
//! The crate bundles a reverse-mode autodiff engine with exact
//! Hessian-vector products ([`ad`]), multilayer perceptrons and their
//! training ([`model`]), Hutchinson trace estimation ([`trace`]), a uniform
//! affine quantizer with quantization-aware fine-tuning ([`quant`]), a
//! sensitivity-ordered bit-allocation planner ([`planner`]) and curvature
//! experiments ([`analysis`]).

pub mod ad;
pub mod analysis;
pub mod error;
pub mod model;
pub mod planner;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use tensor::Tensor;
