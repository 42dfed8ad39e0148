//! Block compressive sensing with ReconNet: measurement matrices, the
//! reconstruction networks, their training procedures, dataset handling and
//! evaluation.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod container;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod fft;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod rng;
pub mod sensing;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Prng;
pub use tensor::Tensor;
