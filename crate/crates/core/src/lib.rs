#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nets;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod post;
pub mod prep;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod volio;

pub use error::{Error, Result};
