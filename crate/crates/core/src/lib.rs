// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asmn;
pub mod corruption;
pub mod depth;
pub mod error;
pub mod gman;
pub mod kgf;
pub mod metrics;
pub mod numerics;
pub mod oracles;
pub mod pipeline;
pub mod pointcloud;
pub mod spatial;

pub use error::{Error, Result};
