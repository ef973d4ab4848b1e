// Validation rejects NaN by negating the accepted range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dt;
pub mod error;
pub mod evalkit;
pub mod featmap;
pub mod hierarchy;
pub mod lastdpm;
pub mod learn;
pub mod pipeline;
pub mod synth;
pub mod trajkit;

pub use error::{Error, Result};
