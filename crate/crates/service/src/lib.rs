//! Session service for the grip-force rig: the 100 Hz run loop, on-disk
//! session format, device profiles, console telemetry and the study report.
//!
//! The `gripforce` binary is a thin shell over [`commands`].

pub mod commands;
pub mod error;
pub mod persist;
pub mod profile;
pub mod report;
pub mod runloop;
pub mod server;
pub mod telemetry;
