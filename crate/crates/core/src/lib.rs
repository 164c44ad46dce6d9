// Negated float comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod covid;
pub mod error;
pub mod io;
pub mod policy;
pub mod polynomaly;
pub mod rewards;
pub mod rollout;
pub mod seed;
pub mod traffic;
pub mod trainer;

pub use error::{Error, Result};
