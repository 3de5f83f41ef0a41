//! Experiment commands over `traverse-core`, shared by the `traverse`
//! binary and the integration tests.

pub mod commands;
pub mod settings;
