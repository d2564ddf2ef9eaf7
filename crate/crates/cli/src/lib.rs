pub mod commands;
pub mod service;

pub use commands::{run, Cli};
