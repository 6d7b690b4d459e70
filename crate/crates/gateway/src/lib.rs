//! Command-line runner and operator gateway for the ConvoWaste simulator.

pub mod commands;
pub mod server;
pub mod wire;

pub use commands::CliError;
pub use server::{Gateway, ReplaySession, ServeOptions, Session};
