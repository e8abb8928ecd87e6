//! Files, configuration and command-line front end for `sgcap-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod io;
pub mod run;
pub mod toy;
