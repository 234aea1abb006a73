// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, run configuration and the command-line pipeline around
//! [`mechprobe_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
