// `!(x > 0.0)` comparisons also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod numerics;
pub mod scheduler;
pub mod data;
pub mod backbone;
pub mod latent;
pub mod forecaster;
pub mod evaluation;
pub mod config;
pub mod cli;
