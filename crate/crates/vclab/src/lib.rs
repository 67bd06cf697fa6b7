//! File formats, run configuration, reports and the command-line driver
//! around [`vclab_core`].

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod features;
pub mod logs;
pub mod report;
pub mod svg;

pub use error::{Error, Result};
pub use vclab_core as core;
