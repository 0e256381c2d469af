//! The composed normalization model and its checkpoint format.

pub mod checkpoint;
mod instance_norm;
mod model;

pub use checkpoint::{load_model, save_model, FORMAT_VERSION};
pub use instance_norm::{plane_stats, InstanceNormLayer, StyleStats, DEFAULT_EPS};
pub use model::{Encoded, FlowBlock, InvNormConfig, InvNormModel, InvNormOutput, BLOCKS};
