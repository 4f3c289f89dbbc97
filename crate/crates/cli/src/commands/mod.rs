//! One module per command family; each returns a serializable report and
//! leaves printing to the binary.

pub mod data;
pub mod edit;
pub mod eval;
pub mod train;
