//! Parallel drivers, simulation studies, file formats and the `vcboot`
//! command line, on top of [`vcboot_core`].

pub mod cli;
pub mod config;
pub mod coucal;
pub mod error;
pub mod io;
pub mod manifest;
pub mod parallel;
pub mod report;
pub mod sequential;
pub mod simstudy;

pub use vcboot_core as core;

pub use error::{Error, Result};
pub use parallel::bootstrap_test_parallel;
