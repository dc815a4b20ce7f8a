//! Operator learning with physics-informed DeepONets.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod constraints;
pub mod error;
pub mod fieldgen;
pub mod netcore;
pub mod ntk;
pub mod operatornet;
pub mod refsolvers;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
