//! Library surface of the experiment driver, so tests and embedders can run
//! the same code paths as the `smf` binary.

pub mod config;
pub mod run;

pub use config::{Command, Overrides, RunConfig};
pub use run::{execute, verify_fields, Executed};
