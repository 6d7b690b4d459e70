//! Simulator and controller for a conveyor-based six-class waste
//! segregation machine.
//!
//! Items ride a belt past a camera station, are classified, and are pushed
//! into one of six bins by three two-way servo gates. The controller talks to
//! an emulated microcontroller over a framed serial protocol; bin levels feed
//! threshold notifications over a modeled GSM channel.

pub mod classifier;
pub mod config;
pub mod domain;
pub mod link;
pub mod sim;
pub mod telemetry;
pub mod time;

pub use config::Config;
pub use domain::{BinIndex, Direction, MachineConfig, RoutingTable, ServoCommand, ServoId, WasteClass};
pub use time::SimTime;
