//! Downlink channel reconstruction for FDD massive MIMO-OFDM.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`sysmodel`] synthesizes multipath UPA-OFDM channels and soundings.
//! 2. [`enomp`] extracts per-path downtilt, azimuth, delay and gain from an
//!    uplink sounding.
//! 3. [`dltrain`] schedules broadcast training beams and estimates the
//!    downlink gains by least squares.
//! 4. [`recon`] rebuilds downlink channels and provides LS/LMMSE baselines.
//! 5. [`mueval`] evaluates zero-forcing sum rates, analytically and by
//!    simulation.
//!
//! [`harness`] wires these together into seeded, reproducible experiments.

pub mod dltrain;
pub mod enomp;
pub mod error;
pub mod harness;
pub mod mueval;
pub mod recon;
pub mod sysmodel;

pub use error::{Error, Result};
