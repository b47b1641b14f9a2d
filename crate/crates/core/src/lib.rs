// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod error;
pub mod evaluation;
pub mod event_model;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
