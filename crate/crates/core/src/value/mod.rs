//! Finite-horizon values and the auxiliary quantities behind the limit value.

pub mod diagnostics;
pub mod field;
pub mod search;
pub mod shifted;
pub mod tables;

pub use diagnostics::{limit_diagnostics, Check, ConvergenceReport};
pub use field::{value_backward, value_backward_with, LayerSummary, ValueField, ValueOptions};
pub use search::{nu_sup_average, w_min_sup, SearchBudget, SupAverage, WSearch};
pub use shifted::{shifted_values, ShiftedValues};
pub use tables::{aux_tables, tau_disc, value_shifted, value_star, AuxConfig, AuxValueTables, VStar};
