#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod oracle;
pub mod tensor;
pub mod training;
pub mod volume;

mod codec;

pub use error::{Error, Result};
