// negated comparisons reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eegpack;
pub mod error;
pub mod gradcheck;
pub mod adapt;
pub mod calibrate;
pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod synthgen;
pub mod trainer;
pub mod par;
pub mod pipeline;
pub mod preprocess;

pub use error::{Error, Result};
