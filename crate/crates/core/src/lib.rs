//! Grip-force sensing and tactile stimulation.
//!
//! A two-lever grip device reports a summed force and a torque; the
//! [`mechanics`] module turns those into per-digit grip forces, and
//! [`calibration`] fits the coefficients from load sweeps. [`actuator`]
//! drives the tactor stages, [`protocol`] sequences trials, [`simulator`]
//! and [`engine`] provide a deterministic virtual rig, and [`analysis`]
//! computes response metrics and the repeated-measures statistics.

pub mod actuator;
pub mod analysis;
pub mod calibration;
pub mod engine;
pub mod mechanics;
pub mod protocol;
pub mod simulator;
