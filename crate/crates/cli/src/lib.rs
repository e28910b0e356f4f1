//! Command-line front end: config resolution, artifact writing and plots.

pub mod commands;
pub mod io;
pub mod svg;
