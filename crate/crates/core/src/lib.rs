//! Transformer-based binary segmentation of multi-attribute field rasters
//! for selecting soil-sampling sites.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Training uses `f32`; the `f64` instantiation exists for
//! finite-difference gradient checks. Concrete aliases for both live here.

pub mod baseline;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Segmenter, TransformerSegmenter};
pub use scalar::Scalar;
pub use tensor::{Gradients, ParamStore, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Segmenter32 = TransformerSegmenter<f32>;
pub type Segmenter64 = TransformerSegmenter<f64>;
