//! RMSProp training and last-k-block fine-tuning at desk scale.

mod augment;
mod checkpoint;
mod data;
mod recipe;
mod run;

pub use augment::*;
pub use checkpoint::*;
pub use data::*;
pub use recipe::*;
pub use run::*;
