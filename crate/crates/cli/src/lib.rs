//! Command-line pipeline around the `pulseprog` library: configuration,
//! stage execution and the artifact manifest.

pub mod config;
pub mod manifest;
pub mod stages;
