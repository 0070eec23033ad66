//! Dual-encoder speech emotion representation learning.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod teachers;
pub mod tensor;

pub use error::{Error, Result};
