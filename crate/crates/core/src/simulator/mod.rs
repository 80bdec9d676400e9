//! Synthetic data, small models and a DP-SGD trainer that records per-step sensitivities.
pub mod dataset;
pub mod model;
pub mod trainer;

pub use dataset::*;
pub use model::ModelKind;
pub use trainer::*;
