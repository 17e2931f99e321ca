// `!(x > 0.0)` is the NaN-rejecting guard used throughout config validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod loss;
pub mod mapper;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod train;
