#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assimilation;
pub mod bundle;
pub mod config;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{DlspfError, Result};
