//! Library surface of the command-line front end: configuration,
//! checkpoints, output plumbing and the four commands. The `bridgevq`
//! binary is a thin argument parser over [`commands`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod log;
pub mod output;
