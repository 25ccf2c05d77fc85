//! File-level pipeline: configuration, artifact I/O and the CLI commands.

pub mod commands;
pub mod config;
pub mod io;

pub use commands::{
    cmd_calibrate, cmd_compare, cmd_eval, cmd_simulate, cmd_train, CompareReport, ItemRecord, Manifest, ModelTag,
};
pub use config::{ItemRole, ItemSpec, RunConfig};
