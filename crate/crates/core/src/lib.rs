//! Long-run average optimal control on a grid: finite-horizon values `V_t`,
//! shifted and sup-average values `V_{m,t}`, `W_{m,n}`, the limit value `V*`,
//! nonexpansivity checks and uniform epsilon-optimal control synthesis.

// `!(x > 0.0)` style comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod error;

pub mod examples;
pub mod grid;
pub mod integrate;
pub mod nonexpansive;
pub mod par;
pub mod problem;
pub mod reach;
pub mod synth;
pub mod value;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
