//! Files, datasets, checkpoints and the command line around
//! [`unsup_restore_core`].

pub mod audio;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod manifest;
pub mod run;

pub use error::{Error, Result};
pub use unsup_restore_core as core;
