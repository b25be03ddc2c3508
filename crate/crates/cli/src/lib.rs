//! Command-line front end: file formats, run configuration, and the staged
//! registration pipeline that the `sonoreg` binary drives.

pub mod config;
pub mod pipeline;
pub mod vvol;
