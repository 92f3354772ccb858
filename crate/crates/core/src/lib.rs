#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod frames;
pub mod losses;
pub mod memory_bank;
pub mod persist;
pub mod trainer;

pub use error::{Error, Result};
