// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod net;
pub mod optim;
pub mod pl;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
