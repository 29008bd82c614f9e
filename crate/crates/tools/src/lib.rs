//! File formats, configuration, and the command-line surface for the
//! nowcasting toolkit. All numerics live in `nowcast-core`; this crate
//! only moves bytes and wires commands together.

pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod tpnn;
pub mod tpnw;

pub use error::{Result, ToolError, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_SELF_CHECK};
