//! Direct preference optimization for toy diffusion and consistency models,
//! with data and model curricula and a mask-free variant.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod curriculum;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod preference;
pub mod rewards;

pub use error::{Error, Result};
