//! Block-based compressed sensing: classical approximate message passing
//! plus two unrolled reconstruction networks trained end to end on a small
//! tape-based autodiff core.

pub mod adam;
pub mod amp;
pub mod checkpoint;
pub mod cli;
pub mod dct;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod params;
pub mod sensing;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{CsError, Result};
pub use tensor::Tensor;
