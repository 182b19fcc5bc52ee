//! Speech-envelope reconstruction from EEG with a pre-LN feed-forward
//! transformer, trained on a negative-Pearson plus L1 objective.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
