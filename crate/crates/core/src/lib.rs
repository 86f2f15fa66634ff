//! Desk-scale transformer engine with per-layer routing between full and
//! streaming-sparse attention.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod entropy;
pub mod error;
pub mod grad;
pub mod model;
pub mod router;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{FluxError, Result};
pub use tensor::Tensor;
