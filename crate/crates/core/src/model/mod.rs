//! EfficientNet construction, cost accounting and trainable layers.

mod config;
mod cost;
mod layers;
mod net;
mod plan;

pub use config::*;
pub use cost::*;
pub use layers::*;
pub use net::*;
pub use plan::*;
