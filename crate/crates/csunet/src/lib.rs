//! File formats, dataset manifests and the `csunet` command line on top of
//! [`csunet_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod fsutil;
pub mod manifest;
pub mod volume;

pub use csunet_core as core;
