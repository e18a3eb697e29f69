//! Command implementations and file formats for the `cwcd` binary.

pub mod commands;
pub mod config;
pub mod corpus;
