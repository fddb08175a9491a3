// `!(x >= 0.0)` is used deliberately so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod closed_form;
pub mod data;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod metric;
pub mod smoothed;
pub mod transport;
