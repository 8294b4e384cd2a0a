//! EfficientNet variants tuned for practical throughput: grouped spatial
//! convolutions with expansion-ratio compensation, proxy-normalized
//! activations on top of batch-independent normalization, and train/test
//! resolution congruence, plus the arithmetic-intensity model used to reason
//! about them and a small CPU training harness.

pub mod activation;
pub mod conv;
pub mod error;
pub mod model;
pub mod norm;
pub mod perf;
pub mod resolution;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
