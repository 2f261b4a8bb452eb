//! Files, formats and services around `ffpe-core`: image and slide IO,
//! patch directories, checkpoints, run configuration, training logs and
//! the reader-study HTTP server.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod server;

pub use error::{Error, Result};
