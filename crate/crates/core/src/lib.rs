//! Per-instance Rényi differential privacy accounting for DP-SGD.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod accountant;
pub mod composition;
pub mod eps_delta;
pub mod error;
pub mod general_update;
pub mod math;
pub mod pipeline;
pub mod quadrature;
pub mod simulator;
pub mod trace_io;
pub mod unlearning;

pub use accountant::*;
pub use error::{Error, ErrorKind, Result};
