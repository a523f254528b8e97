//! Quantum platform manager, programming interface and gateway service for
//! hybrid HPC and quantum jobs.
//!
//! The pure algorithms (circuits, toolchain, simulator, scheduler) live in
//! `qbridge-core`; this crate adds the runtime around them.

pub mod cli;
pub mod engine;
pub mod gateway;
pub mod manifest;
pub mod qpi;
pub mod qpm;
pub mod sim_backend;
pub mod telemetry;
pub mod wire;

pub use engine::{ClockMode, Engine, EngineConfig, EngineError};
pub use manifest::{DeviceEntry, Manifest};
pub use qpi::{ApiError, QpiApi, QpiError, Session};
