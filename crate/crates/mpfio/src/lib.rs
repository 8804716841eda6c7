//! Configuration, experiment registry and runner behind the `mpfio` binary.

pub mod config;
pub mod experiments;
pub mod runner;
