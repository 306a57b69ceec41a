//! Standard-library companion to `ladia-core`: file formats,
//! checkpoints, configuration resolution, the interactive REPL, and the
//! command implementations behind the `ladia` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod formats;
pub mod repl;
